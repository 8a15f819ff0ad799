use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;
use serde_json::{json, Value};

use causalfit::bif::{parse_bif_network, unparse_bif};
use causalfit::confound::{detect_confounders, drop_flagged_edges};
use causalfit::fit::{fit_with_models, gradient_variance_probe, mlp_models, FitConfig};
use causalfit::graph::{
    edge_precision_recall, enforce_acyclic_order, gen_graph, is_acyclic, shd, CausalGraph, EdgeParams, GraphKind, OrderMode,
    EXHAUSTIVE_MAX_NODES,
};
use causalfit::io::{read_dataset, write_dataset};
use causalfit::model::table_estimators;
use causalfit::scm::{
    add_latent_confounders, generate_dataset, make_deterministic_cgm, make_neural_cgm, make_product_cgm, Cgm,
    PairFilter,
};
use causalfit::verify::check_conditions;

mod manifest;
use manifest::Manifest;

/// Version of every JSON document this tool writes.
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Parser, Debug)]
#[command(name = "causalfit", version, about = "Causal structure discovery from interventional data")]
struct Cli {
    /// Worker threads; results are identical for any value.
    #[arg(long, global = true, env = "CAUSALFIT_THREADS", default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Sample a ground-truth model and a dataset from it.
    Generate(GenerateArgs),
    /// Learn a graph from a dataset directory.
    Fit(FitArgs),
    /// Compare a predicted graph with the true one.
    Eval(EvalArgs),
    /// Check the convergence conditions of a small model exactly.
    Verify(VerifyArgs),
    /// Compare the spread of the two γ-gradient estimators.
    Variance(VarianceArgs),
    /// Convert a `.bif` network into model and graph files.
    Parse(ParseArgs),
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Mechanism {
    Neural,
    Product,
    Deterministic,
}

#[derive(Args, Debug)]
struct GenerateArgs {
    #[arg(long)]
    kind: GraphKind,
    #[arg(long, default_value_t = 25)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    cardinality: usize,
    #[arg(long, value_enum, default_value_t = Mechanism::Neural)]
    mechanism: Mechanism,
    /// Edge probability for `--kind random`.
    #[arg(long, default_value_t = 0.3)]
    edge_prob: f64,
    #[arg(long = "obs", default_value_t = 5000)]
    obs_count: usize,
    /// Rows per intervened variable.
    #[arg(long = "int", default_value_t = 200)]
    int_count: usize,
    /// Number of latent confounders added over pairs of observed variables.
    #[arg(long, default_value_t = 0)]
    confounders: usize,
    /// Give leaves of a deterministic model noisy tables too.
    #[arg(long)]
    leaf_noise: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum, PartialEq, Eq)]
enum Estimator {
    Mlp,
    Table,
}

#[derive(Args, Debug)]
struct FitArgs {
    /// Dataset directory.
    #[arg(long)]
    data: PathBuf,
    /// JSON file with training settings; flags take precedence.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Enforce a global variable order on the result.
    #[arg(long)]
    acyclic: bool,
    #[arg(long)]
    confounders: bool,
    #[arg(long)]
    partial: bool,
    #[arg(long, value_enum, default_value_t = Estimator::Mlp)]
    estimator: Estimator,
    /// Ground-truth model; required by `--estimator table`.
    #[arg(long)]
    cgm: Option<PathBuf>,
    /// Ground-truth graph, used for the SHD column of the trace.
    #[arg(long)]
    truth: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    /// Threshold on the confounder score.
    #[arg(long, default_value_t = 0.4)]
    tau: f64,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Format {
    Json,
    Table,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[arg(long)]
    pred: PathBuf,
    #[arg(long)]
    truth: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Args, Debug)]
struct VerifyArgs {
    /// Model as JSON (from `generate` or `parse`).
    #[arg(long, conflicts_with = "bif", required_unless_present = "bif")]
    cgm: Option<PathBuf>,
    #[arg(long)]
    bif: Option<PathBuf>,
    #[arg(long, default_value_t = 0.004)]
    lambda: f64,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Args, Debug)]
struct VarianceArgs {
    #[arg(long)]
    data: PathBuf,
    /// Ground-truth model whose exact conditionals score the graphs.
    #[arg(long)]
    cgm: PathBuf,
    #[arg(long, value_delimiter = ',', default_values_t = [20, 100, 400])]
    k: Vec<usize>,
    #[arg(long, default_value_t = 100)]
    reps: usize,
    #[arg(long, default_value_t = 0.004)]
    lambda: f64,
    #[arg(long, default_value_t = 128)]
    batch_size: usize,
    /// θ magnitude along the true topological order; 0 evaluates at γ = θ = 0.
    #[arg(long, default_value_t = 6.0)]
    orient: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Args, Debug)]
struct ParseArgs {
    #[arg(long)]
    bif: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

/// An error with the exit code it maps to.
#[derive(Debug)]
struct Failure {
    code: u8,
    kind: String,
    message: String,
}

fn classify(e: &anyhow::Error) -> Failure {
    let lib = e.chain().find_map(|c| c.downcast_ref::<causalfit::Error>());
    let (code, kind) = match lib {
        Some(causalfit::Error::Capacity(_)) => (4, "capacity"),
        Some(causalfit::Error::Config(_) | causalfit::Error::Param(_)) => (2, lib.map_or("usage", |l| l.kind())),
        Some(l) => (3, l.kind()),
        None if e.chain().any(|c| c.is::<std::io::Error>() || c.is::<serde_json::Error>()) => (3, "data"),
        None => (2, "usage"),
    };
    Failure {
        code,
        kind: kind.to_string(),
        message: format!("{e:#}"),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let f = classify(&e);
            let body = json!({
                "schema_version": SCHEMA_VERSION,
                "error": { "kind": f.kind, "message": f.message },
                "exit_code": f.code,
            });
            eprintln!("{body}");
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads == 0 {
        return Err(causalfit::Error::Config("--threads must be at least 1".into()).into());
    }
    match cli.cmd {
        Cmd::Generate(a) => cmd_generate(a),
        Cmd::Fit(a) => cmd_fit(a, cli.threads),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::Verify(a) => cmd_verify(a),
        Cmd::Variance(a) => cmd_variance(a, cli.threads),
        Cmd::Parse(a) => cmd_parse(a),
    }
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Loads a graph from JSON or from the `nodes:` / `edge:` text format.
fn read_graph(path: &Path) -> Result<CausalGraph> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    if text.trim_start().starts_with('{') {
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    } else {
        CausalGraph::from_text(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

/// The graph restricted to its first `n` variables.
fn observed_subgraph(g: &CausalGraph, n: usize) -> Result<CausalGraph> {
    let edges: Vec<(usize, usize)> = g.edges().into_iter().filter(|&(i, j)| i < n && j < n).collect();
    Ok(CausalGraph::from_edges(g.vars()[..n].to_vec(), &edges)?)
}

fn cmd_generate(a: GenerateArgs) -> Result<()> {
    let t0 = Instant::now();
    let mut m = Manifest::new("generate");
    let base = gen_graph(a.kind, a.n, a.edge_prob, a.seed)?;
    let mut base = base;
    base.set_cardinality(a.cardinality)?;
    let (full, latents) = if a.confounders > 0 {
        add_latent_confounders(&base, a.confounders, a.seed, PairFilter::Unconnected)?
    } else {
        (base.clone(), vec![])
    };
    let cgm = match a.mechanism {
        Mechanism::Neural => make_neural_cgm(&full, a.cardinality, a.seed)?,
        Mechanism::Product => make_product_cgm(&full, a.cardinality, a.seed)?,
        Mechanism::Deterministic => make_deterministic_cgm(&full, a.cardinality, a.seed, a.leaf_noise)?,
    };
    let targets: Vec<usize> = (0..a.n).collect();
    let data = generate_dataset(&cgm, a.obs_count, a.int_count, &targets, a.seed, &latents)?;
    create_dir(&a.out)?;
    let data_dir = a.out.join("data");
    write_dataset(&data, &data_dir)?;
    let truth = observed_subgraph(&full, a.n)?;
    let truth_path = a.out.join("truth.json");
    write_json(&truth_path, &truth)?;
    let cgm_path = a.out.join("cgm.json");
    write_json(&cgm_path, &cgm)?;
    if !latents.is_empty() {
        let pairs: Vec<Value> = latents
            .iter()
            .map(|&l| json!({ "latent": full.vars()[l].name, "children": full.children(l) }))
            .collect();
        let p = a.out.join("confounders.json");
        write_json(&p, &json!({ "schema_version": SCHEMA_VERSION, "confounders": pairs }))?;
        m.output(&p)?;
    }
    m.seed("seed", a.seed);
    m.config = json!({
        "kind": a.kind, "n": a.n, "cardinality": a.cardinality, "edge_prob": a.edge_prob,
        "mechanism": format!("{:?}", a.mechanism).to_lowercase(),
        "obs": a.obs_count, "int": a.int_count, "confounders": a.confounders, "leaf_noise": a.leaf_noise,
    });
    m.dataset = Some(data_dir.clone());
    for entry in std::fs::read_dir(&data_dir)? {
        m.output(&entry?.path())?;
    }
    m.output(&truth_path)?;
    m.output(&cgm_path)?;
    m.finish(&a.out, t0)?;
    println!(
        "{}",
        json!({ "schema_version": SCHEMA_VERSION, "out": a.out, "nodes": a.n, "edges": truth.edge_count(), "latents": latents.len() })
    );
    Ok(())
}

/// Defaults, then the config file, then explicit flags.
fn resolve_config(a: &FitArgs, threads: usize) -> Result<FitConfig> {
    let mut c = match &a.config {
        Some(p) => read_json::<FitConfig>(p).map_err(|e| causalfit::Error::Config(format!("{e:#}")))?,
        None => FitConfig::default(),
    };
    if let Some(v) = a.epochs {
        c.epochs = v;
    }
    if let Some(v) = a.lambda {
        c.lambda_sparse = v;
    }
    if let Some(v) = a.batch_size {
        c.batch_size = v;
    }
    if let Some(v) = a.seed {
        c.seed = v;
    }
    if a.partial {
        c.partial = true;
    }
    if a.confounders {
        c.confounders = true;
    }
    c.threads = threads;
    c.validate()?;
    Ok(c)
}

fn cmd_fit(a: FitArgs, threads: usize) -> Result<()> {
    let t0 = Instant::now();
    let mut m = Manifest::new("fit");
    let config = resolve_config(&a, threads)?;
    let data = read_dataset(&a.data)?;
    let truth = a.truth.as_deref().map(read_graph).transpose()?;
    let out = match a.estimator {
        Estimator::Mlp => {
            let mut models = mlp_models(&data, &config)?;
            fit_with_models(&mut models, &data, &config, truth.as_ref())?
        }
        Estimator::Table => {
            let path = a
                .cgm
                .as_deref()
                .ok_or_else(|| causalfit::Error::Config("--estimator table needs --cgm".into()))?;
            let cgm: Cgm = read_json(path)?;
            cgm.validate()?;
            if cgm.n() != data.n() {
                bail!(causalfit::Error::Config("model and dataset sizes differ".into()));
            }
            let mut models = table_estimators(&cgm)?;
            fit_with_models(&mut models, &data, &config, truth.as_ref())?
        }
    };
    create_dir(&a.out)?;
    let confounders = out.split.as_ref().map(|sg| detect_confounders(sg, a.tau)).transpose()?;
    let mut graph = if a.acyclic {
        let mode = if data.n() <= EXHAUSTIVE_MAX_NODES { OrderMode::Exhaustive } else { OrderMode::Greedy };
        let (order, dag) = enforce_acyclic_order(&out.params, &data.meta, mode)?;
        let p = a.out.join("order.json");
        write_json(&p, &json!({ "schema_version": SCHEMA_VERSION, "order": order.0 }))?;
        m.output(&p)?;
        dag
    } else {
        out.graph.clone()
    };
    if let Some(report) = &confounders {
        drop_flagged_edges(&mut graph, report);
    }
    let graph_path = a.out.join("graph.json");
    write_json(&graph_path, &graph)?;
    let params_path = a.out.join("params.json");
    write_json(&params_path, &out.params)?;
    let trace_path = a.out.join("trace.jsonl");
    let mut trace = String::new();
    for e in &out.trace {
        trace.push_str(&serde_json::to_string(e)?);
        trace.push('\n');
    }
    std::fs::write(&trace_path, trace)?;
    for p in [&graph_path, &params_path, &trace_path] {
        m.output(p)?;
    }
    if let Some(report) = &confounders {
        let p = a.out.join("confounders.json");
        write_json(&p, report)?;
        m.output(&p)?;
    }
    let mut summary = json!({ "schema_version": SCHEMA_VERSION, "edges": graph.edge_count(), "acyclic": is_acyclic(&graph) });
    if let Some(t) = &truth {
        summary["shd"] = json!(shd(&graph, t)?);
    }
    m.seed("seed", config.seed);
    m.config = serde_json::to_value(&config)?;
    m.config["estimator"] = json!(format!("{:?}", a.estimator).to_lowercase());
    m.config["acyclic"] = json!(a.acyclic);
    m.dataset = Some(a.data.clone());
    m.finish(&a.out, t0)?;
    println!("{summary}");
    Ok(())
}

#[derive(Serialize)]
struct EvalReport {
    schema_version: u32,
    shd: usize,
    precision: f64,
    recall: f64,
}

fn cmd_eval(a: EvalArgs) -> Result<()> {
    let pred = read_graph(&a.pred)?;
    let truth = read_graph(&a.truth)?;
    let pn: Vec<&str> = pred.vars().iter().map(|v| v.name.as_str()).collect();
    let tn: Vec<&str> = truth.vars().iter().map(|v| v.name.as_str()).collect();
    if pn != tn {
        bail!(causalfit::Error::Param("predicted and true graphs have different variables".into()));
    }
    let (precision, recall) = edge_precision_recall(&pred, &truth)?;
    let r = EvalReport {
        schema_version: SCHEMA_VERSION,
        shd: shd(&pred, &truth)?,
        precision,
        recall,
    };
    match a.format {
        Format::Json => println!("{}", serde_json::to_string(&r)?),
        Format::Table => println!("shd {}\nprecision {:.4}\nrecall {:.4}", r.shd, r.precision, r.recall),
    }
    Ok(())
}

fn cmd_verify(a: VerifyArgs) -> Result<()> {
    let cgm = match (&a.cgm, &a.bif) {
        (Some(p), _) => read_json::<Cgm>(p)?,
        (None, Some(p)) => {
            let text = std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            parse_bif_network(&text).with_context(|| format!("parsing {}", p.display()))?.cgm
        }
        (None, None) => unreachable!("clap requires one of --cgm and --bif"),
    };
    let report = check_conditions(&cgm, a.lambda)?;
    match a.format {
        Format::Json => {
            let mut v = serde_json::to_value(&report)?;
            v["schema_version"] = json!(SCHEMA_VERSION);
            println!("{}", serde_json::to_string_pretty(&v)?);
        }
        Format::Table => print!("{}", report.to_table()),
    }
    Ok(())
}

fn cmd_variance(a: VarianceArgs, _threads: usize) -> Result<()> {
    if a.reps < 30 {
        bail!(causalfit::Error::Config(format!("--reps must be at least 30, got {}", a.reps)));
    }
    let data = read_dataset(&a.data)?;
    let cgm: Cgm = read_json(&a.cgm)?;
    if cgm.n() != data.n() {
        bail!(causalfit::Error::Config("model and dataset sizes differ".into()));
    }
    let models = table_estimators(&cgm)?;
    let params = EdgeParams::oriented(&cgm.graph, a.orient)?;
    let mut rows = Vec::new();
    for &k in &a.k {
        let mut r = causalfit::rng::stream(a.seed, k as u64);
        let rep = gradient_variance_probe(&models, &data, &params, k, a.reps, a.lambda, a.batch_size, &mut r)?;
        let true_edges: Vec<_> = rep
            .edges
            .iter()
            .filter(|e| cgm.graph.has_edge(e.i, e.j) && e.scale.is_finite())
            .collect();
        let mean = |f: &dyn Fn(&causalfit::fit::EdgeVariance) -> f64| {
            true_edges.iter().map(|e| f(e)).sum::<f64>() / true_edges.len().max(1) as f64
        };
        let below_half = true_edges.iter().filter(|e| e.std <= 0.5 * e.scaled_baseline_std).count();
        rows.push(json!({
            "k": k,
            "target": rep.target,
            "true_edges": true_edges.len(),
            "true_edges_below_half": below_half,
            "mean_std": mean(&|e| e.std),
            "mean_scaled_baseline_std": mean(&|e| e.scaled_baseline_std),
            "edges": rep.edges,
        }));
    }
    match a.format {
        Format::Json => println!(
            "{}",
            serde_json::to_string_pretty(&json!({ "schema_version": SCHEMA_VERSION, "reps": a.reps, "results": rows }))?
        ),
        Format::Table => {
            println!("{:>6} {:>14} {:>20} {:>12}", "K", "std", "scaled_baseline_std", "below_half");
            for r in &rows {
                println!(
                    "{:>6} {:>14.6} {:>20.6} {:>8}/{}",
                    r["k"],
                    r["mean_std"].as_f64().unwrap_or(f64::NAN),
                    r["mean_scaled_baseline_std"].as_f64().unwrap_or(f64::NAN),
                    r["true_edges_below_half"],
                    r["true_edges"]
                );
            }
        }
    }
    Ok(())
}

fn cmd_parse(a: ParseArgs) -> Result<()> {
    let t0 = Instant::now();
    let mut m = Manifest::new("parse");
    let text = std::fs::read_to_string(&a.bif).with_context(|| format!("reading {}", a.bif.display()))?;
    let net = parse_bif_network(&text).with_context(|| format!("parsing {}", a.bif.display()))?;
    create_dir(&a.out)?;
    let cgm_path = a.out.join("cgm.json");
    write_json(&cgm_path, &net.cgm)?;
    let graph_path = a.out.join("graph.json");
    write_json(&graph_path, &net.cgm.graph)?;
    let bif_path = a.out.join("network.bif");
    std::fs::write(&bif_path, unparse_bif(&net.cgm, &net.name)?)?;
    for p in [&cgm_path, &graph_path, &bif_path] {
        m.output(p)?;
    }
    m.config = json!({ "bif": a.bif });
    m.finish(&a.out, t0)?;
    println!(
        "{}",
        json!({ "schema_version": SCHEMA_VERSION, "network": net.name, "nodes": net.cgm.n(), "edges": net.cgm.graph.edge_count() })
    );
    Ok(())
}
