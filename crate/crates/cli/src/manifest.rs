//! One `manifest.json` per run: the command line, settings, seeds, inputs,
//! outputs with their SHA-256 and wall-clock time.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{Context, Result};
use serde::Serialize;
use serde_json::Value;
use sha2::{Digest, Sha256};

#[derive(Serialize)]
pub struct Artifact {
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Serialize)]
pub struct Manifest {
    pub schema_version: u32,
    pub tool_version: &'static str,
    pub command: &'static str,
    pub argv: Vec<String>,
    pub config: Value,
    pub seeds: BTreeMap<String, u64>,
    pub dataset: Option<PathBuf>,
    pub outputs: Vec<Artifact>,
    pub wall_seconds: f64,
}

pub fn sha256_file(path: &Path) -> Result<String> {
    let bytes = std::fs::read(path).with_context(|| format!("hashing {}", path.display()))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

impl Manifest {
    pub fn new(command: &'static str) -> Self {
        Manifest {
            schema_version: crate::SCHEMA_VERSION,
            tool_version: env!("CARGO_PKG_VERSION"),
            command,
            argv: std::env::args().collect(),
            config: Value::Null,
            seeds: BTreeMap::new(),
            dataset: None,
            outputs: Vec::new(),
            wall_seconds: 0.0,
        }
    }

    pub fn seed(&mut self, name: &str, value: u64) {
        self.seeds.insert(name.to_string(), value);
    }

    pub fn output(&mut self, path: &Path) -> Result<()> {
        let sha256 = sha256_file(path)?;
        self.outputs.push(Artifact {
            path: path.to_path_buf(),
            sha256,
        });
        Ok(())
    }

    /// Writes `manifest.json` into `dir`.
    pub fn finish(mut self, dir: &Path, started: Instant) -> Result<()> {
        self.wall_seconds = started.elapsed().as_secs_f64();
        self.outputs.sort_by(|a, b| a.path.cmp(&b.path));
        let path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&self)?;
        std::fs::write(&path, text + "\n").with_context(|| format!("writing {}", path.display()))
    }
}
