//! Dataset directories.
//!
//! ```text
//! meta.json          variables, intervened targets, seed
//! obs.csv            observational rows, no header
//! int_<name>.csv     one file per intervened variable
//! ```
//!
//! Cells are integer category indices. Files not listed here are ignored
//! with a warning.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::VarMeta;
use crate::scm::{Dataset, Intervention, InterventionBlock, Samples};

pub const DATASET_SCHEMA_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Meta {
    schema_version: u32,
    vars: Vec<VarMeta>,
    obs_rows: usize,
    interventions: Vec<MetaBlock>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MetaBlock {
    target: String,
    rows: usize,
    kind: String,
}

fn int_file(name: &str) -> String {
    format!("int_{name}.csv")
}

fn write_csv(path: &Path, s: &Samples) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    for row in s.iter() {
        w.write_record(row.iter().map(|v| v.to_string()))
            .map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::data(path, format!("{other:?}")),
    }
}

fn read_csv(path: &Path, meta: &[VarMeta], expected_rows: usize) -> Result<Samples> {
    if !path.exists() {
        return Err(Error::data(path, "missing file"));
    }
    let mut r = csv::ReaderBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_err(path, e))?;
    let cols = meta.len();
    let mut s = Samples::new(cols);
    let mut row = vec![0u16; cols];
    for (line, rec) in r.records().enumerate() {
        let rec = rec.map_err(|e| csv_err(path, e))?;
        if rec.len() != cols {
            return Err(Error::data(
                path,
                format!("line {}: {} columns, expected {cols}", line + 1, rec.len()),
            ));
        }
        for (k, cell) in rec.iter().enumerate() {
            let v: u16 = cell
                .trim()
                .parse()
                .ok()
                .filter(|&v: &u16| usize::from(v) < meta[k].cardinality)
                .ok_or_else(|| {
                    Error::data(
                        path,
                        format!("line {}: '{cell}' is not a category of {}", line + 1, meta[k].name),
                    )
                })?;
            row[k] = v;
        }
        s.push_row(&row);
    }
    if s.rows() != expected_rows {
        return Err(Error::data(
            path,
            format!("{} rows, meta.json says {expected_rows}", s.rows()),
        ));
    }
    Ok(s)
}

/// Writes `dataset` into `dir`, creating it if needed.
pub fn write_dataset(dataset: &Dataset, dir: &Path) -> Result<()> {
    dataset.validate()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let meta = Meta {
        schema_version: DATASET_SCHEMA_VERSION,
        vars: dataset.meta.clone(),
        obs_rows: dataset.obs.rows(),
        interventions: dataset
            .ints
            .iter()
            .map(|(&t, b)| MetaBlock {
                target: dataset.meta[t].name.clone(),
                rows: b.samples.rows(),
                kind: match b.kind {
                    Intervention::Uniform => "uniform".into(),
                },
            })
            .collect(),
        seed: dataset.seed,
    };
    let path = dir.join("meta.json");
    let text = serde_json::to_string_pretty(&meta).map_err(|e| Error::data(&path, e.to_string()))?;
    fs::write(&path, text + "\n").map_err(|e| Error::io(&path, e))?;
    write_csv(&dir.join("obs.csv"), &dataset.obs)?;
    for (&t, b) in &dataset.ints {
        write_csv(&dir.join(int_file(&dataset.meta[t].name)), &b.samples)?;
    }
    Ok(())
}

/// Reads a directory written by [`write_dataset`].
pub fn read_dataset(dir: &Path) -> Result<Dataset> {
    let path = dir.join("meta.json");
    if !path.exists() {
        return Err(Error::data(&path, "missing file"));
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let meta: Meta = serde_json::from_str(&text).map_err(|e| Error::data(&path, e.to_string()))?;
    if meta.schema_version != DATASET_SCHEMA_VERSION {
        return Err(Error::data(
            &path,
            format!("unsupported schema version {}", meta.schema_version),
        ));
    }
    crate::graph::validate_vars(&meta.vars).map_err(|e| Error::data(&path, e.to_string()))?;
    let obs = read_csv(&dir.join("obs.csv"), &meta.vars, meta.obs_rows)?;
    let mut ints = BTreeMap::new();
    let mut known: Vec<PathBuf> = vec![dir.join("meta.json"), dir.join("obs.csv")];
    for b in &meta.interventions {
        let t = meta
            .vars
            .iter()
            .position(|v| v.name == b.target)
            .ok_or_else(|| Error::data(&path, format!("unknown intervention target '{}'", b.target)))?;
        if b.kind != "uniform" {
            return Err(Error::data(&path, format!("unknown intervention kind '{}'", b.kind)));
        }
        let file = dir.join(int_file(&b.target));
        let samples = read_csv(&file, &meta.vars, b.rows)?;
        known.push(file);
        if ints
            .insert(
                t,
                InterventionBlock {
                    samples,
                    kind: Intervention::Uniform,
                },
            )
            .is_some()
        {
            return Err(Error::data(&path, format!("target '{}' listed twice", b.target)));
        }
    }
    if let Ok(entries) = fs::read_dir(dir) {
        for e in entries.flatten() {
            let p = e.path();
            if !known.contains(&p) {
                log::warn!("ignoring unknown file {}", p.display());
            }
        }
    }
    Ok(Dataset {
        meta: meta.vars,
        obs,
        ints,
        seed: meta.seed,
    })
}
