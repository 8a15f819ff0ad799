//! Acceptance suite: runs every criterion at its stated tolerance and prints
//! one PASS/FAIL line per criterion.
//!
//! ```text
//! cargo test --release --test acceptance            # all eight
//! cargo test --release --test acceptance -- 1 5 8   # a selection
//! ACCEPTANCE_STRICT=1 cargo test --test acceptance  # any FAIL exits non-zero
//! ```
//!
//! Criteria listed in `DOCUMENTED_SHORTFALLS` are known to miss their bar
//! for reasons recorded in the decisions ledger. They still run at full
//! tolerance and still print FAIL; they only stop a default run from
//! exiting non-zero. Any other failure does.

use std::io::Write;
use std::time::Instant;

use causalfit::bif::{fixtures, parse_bif};
use causalfit::confound::{detect_confounders, drop_flagged_edges};
use causalfit::fit::*;
use causalfit::graph::*;
use causalfit::io::{read_dataset, write_dataset};
use causalfit::model::{table_estimators, MlpEstimator};
use causalfit::rng;
use causalfit::scm::*;
use causalfit::verify::{check_conditions, exact_gamma_gradient};
use rand::Rng as _;

const DOCUMENTED_SHORTFALLS: &[usize] = &[2, 7];

struct Outcome {
    pass: bool,
    detail: String,
}

fn out(line: &str) {
    // written straight to the handle so the line survives output capture
    let mut s = std::io::stdout().lock();
    let _ = writeln!(s, "{line}");
    let _ = s.flush();
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol
}

// 1. Worked chain example through the condition checker.
fn criterion_1() -> Outcome {
    let t0 = Instant::now();
    let cgm = parse_bif(fixtures::CHAIN3).expect("bundled chain parses");
    let r = check_conditions(&cgm, 0.004).expect("checker runs");
    let secs = t0.elapsed().as_secs_f64();
    let e12 = r.pair(0, 1).unwrap();
    let e23 = r.pair(1, 2).unwrap();
    let p13 = r.pair(0, 2).unwrap();
    let vals = [
        ("cond1 X1->X2 {}", e12.cond1_value(&[]).unwrap(), 0.023),
        ("cond1 X1->X2 {X3}", e12.cond1_value(&[2]).unwrap(), 0.015),
        ("cond3 min X1->X2", e12.cond3_min.unwrap(), 0.020),
        ("cond3 min X2->X3", e23.cond3_min.unwrap(), 0.193),
        ("X1,X3 {}", p13.cond1_value(&[]).unwrap(), 0.008),
        ("X1,X3 {X2}", p13.cond1_value(&[1]).unwrap(), 0.0),
        ("lambda_max", r.lambda_max.unwrap_or(f64::NAN), 0.020),
    ];
    let bad: Vec<String> = vals
        .iter()
        .filter(|(_, v, want)| !close(*v, *want, 1e-3))
        .map(|(n, v, want)| format!("{n}={v:.4} (want {want})"))
        .collect();
    let shown: Vec<String> = vals.iter().map(|(n, v, _)| format!("{n}={v:.3}")).collect();
    Outcome {
        pass: bad.is_empty() && secs < 1.0,
        detail: format!(
            "{}; {secs:.3}s (limit 1s){}",
            shown.join(", "),
            if bad.is_empty() { String::new() } else { format!("; off: {}", bad.join(", ")) }
        ),
    }
}

// 2. Sparsity boundary on the chain with exact conditionals.
fn criterion_2() -> Outcome {
    let t0 = Instant::now();
    let chain = parse_bif(fixtures::CHAIN3).unwrap();
    let mut low_ok = 0;
    let mut high_ok = 0;
    let mut notes = Vec::new();
    for seed in 0..5u64 {
        let data = generate_dataset(&chain, 100_000, 10_000, &[0, 1, 2], seed, &[]).unwrap();
        for (lambda, ok) in [(0.019, &mut low_ok), (0.021, &mut high_ok)] {
            let mut models = table_estimators(&chain).unwrap();
            let cfg = FitConfig { lambda_sparse: lambda, seed, ..Default::default() };
            let fit = fit_with_models(&mut models, &data, &cfg, None).unwrap();
            let d = shd(&fit.graph, &chain.graph).unwrap();
            let want = if lambda < 0.02 {
                d == 0
            } else {
                d == 1 && fit.graph.edges() == vec![(1, 2)]
            };
            if want {
                *ok += 1;
            }
            notes.push(format!("s{seed}@{lambda}:shd{d}"));
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    Outcome {
        pass: low_ok >= 4 && high_ok >= 4 && secs < 300.0,
        detail: format!(
            "lambda 0.019 SHD 0 in {low_ok}/5, lambda 0.021 drops only X1->X2 in {high_ok}/5 (need 4/5 each); {}; {secs:.0}s (limit 300s)",
            notes.join(" ")
        ),
    }
}

// 3. Structure recovery on the three synthetic families.
fn criterion_3() -> Outcome {
    let mut pass = true;
    let mut parts = Vec::new();
    for kind in [GraphKind::Chain, GraphKind::Bidiag, GraphKind::Jungle] {
        let t0 = Instant::now();
        let mut shds = Vec::new();
        for seed in 0..5u64 {
            let g = gen_graph(kind, 8, 0.3, seed).unwrap();
            let cgm = make_neural_cgm(&g, 10, seed).unwrap();
            let targets: Vec<usize> = (0..8).collect();
            let data = generate_dataset(&cgm, 5000, 200, &targets, seed, &[]).unwrap();
            let cfg = FitConfig { seed, ..Default::default() };
            let fit = fit(&data, &cfg).unwrap();
            let (_, dag) = enforce_acyclic_order(&fit.params, &data.meta, OrderMode::Exhaustive).unwrap();
            shds.push(shd(&dag, &g).unwrap());
        }
        let secs = t0.elapsed().as_secs_f64();
        let mean = shds.iter().sum::<usize>() as f64 / shds.len() as f64;
        pass &= mean <= 1.0 && secs <= 300.0;
        parts.push(format!("{kind} mean SHD {mean:.1} {shds:?} {secs:.0}s"));
    }
    Outcome {
        pass,
        detail: format!("{} (need mean <= 1.0, <= 300s per family)", parts.join("; ")),
    }
}

// 4. Spread of the two γ estimators at K=100.
fn criterion_4() -> Outcome {
    let t0 = Instant::now();
    // three categories keep the exact joint of eight variables small
    let g = gen_graph(GraphKind::Random, 8, 0.3, 0).unwrap();
    let cgm = make_neural_cgm(&g, 3, 0).unwrap();
    let targets: Vec<usize> = (0..8).collect();
    let data = generate_dataset(&cgm, 100, 512, &targets, 0, &[]).unwrap();
    let models = table_estimators(&cgm).unwrap();
    let params = EdgeParams::oriented(&g, 6.0).unwrap();
    let mut r = rng::stream(0, 100);
    let rep = gradient_variance_probe(&models, &data, &params, 100, 200, 0.004, 128, &mut r).unwrap();
    let secs = t0.elapsed().as_secs_f64();
    let edges: Vec<&EdgeVariance> = rep.edges.iter().filter(|e| g.has_edge(e.i, e.j)).collect();
    let good = edges.iter().filter(|e| e.std <= 0.5 * e.scaled_baseline_std).count();
    let frac = good as f64 / edges.len().max(1) as f64;
    let ratios: Vec<String> = edges
        .iter()
        .map(|e| format!("{}->{}:{:.3}", e.i, e.j, e.std / e.scaled_baseline_std))
        .collect();
    Outcome {
        pass: !edges.is_empty() && frac >= 0.9 && secs < 120.0,
        detail: format!(
            "{good}/{} true edges with std ratio <= 0.5 ({:.0}%, need 90%); ratios {}; target X{}; {secs:.1}s (limit 120s)",
            edges.len(),
            100.0 * frac,
            ratios.join(" "),
            rep.target
        ),
    }
}

fn three_node_models() -> Vec<(&'static str, Cgm)> {
    let full = gen_graph(GraphKind::Full, 3, 0.0, 0).unwrap();
    let collider = gen_graph(GraphKind::Collider, 3, 0.0, 0).unwrap();
    vec![
        ("chain", parse_bif(fixtures::CHAIN3).unwrap()),
        ("collider", make_product_cgm(&collider, 2, 1).unwrap()),
        ("full", make_neural_cgm(&full, 2, 2).unwrap()),
    ]
}

// 5. Monte-Carlo γ gradient against full enumeration.
fn criterion_5() -> Outcome {
    let t0 = Instant::now();
    let steps = 10_000;
    let lambda = 0.004;
    let mut worst: f64 = 0.0;
    let mut misses = Vec::new();
    let mut checked = 0;
    for (name, cgm) in three_node_models() {
        let models = table_estimators(&cgm).unwrap();
        for (g0, t0v) in [(0.0, 0.0), (1.0, -1.0)] {
            let mut p = EdgeParams::zeros(3);
            for i in 0..3 {
                for j in 0..3 {
                    if i != j {
                        p.set_gamma(i, j, g0);
                    }
                    if i < j {
                        p.set_theta(i, j, t0v);
                    }
                }
            }
            let mut r = rng::stream(5, 0);
            let mut sum = [0.0; 9];
            let mut sq = [0.0; 9];
            for s in 0..steps {
                // a fresh batch from the true interventional distribution each step
                let t = r.random_range(0..3);
                let batch = sample_int(&cgm, t, 32, 1000 + s as u64, &[]).unwrap();
                let graphs = sample_graphs(&p, 100, &mut r);
                let g = gamma_gradient(&collect_edge_stats(&models, &batch, &graphs), &p, lambda, t);
                for x in 0..9 {
                    sum[x] += g[x];
                    sq[x] += g[x] * g[x];
                }
            }
            for i in 0..3 {
                for j in 0..3 {
                    if i == j {
                        continue;
                    }
                    let x = i * 3 + j;
                    let m = sum[x] / steps as f64;
                    let se = ((sq[x] / steps as f64 - m * m) / (steps - 1) as f64).sqrt();
                    let exact = exact_gamma_gradient(&cgm, &p, lambda, i, j).unwrap();
                    let z = (m - exact) / se;
                    worst = worst.max(z.abs());
                    checked += 1;
                    if z.abs() > 3.0 {
                        misses.push(format!("{name} ({g0},{t0v}) {i}->{j} z={z:.2}"));
                    }
                }
            }
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    Outcome {
        pass: misses.is_empty() && secs < 60.0,
        detail: format!(
            "{checked} entries over 3 models x 2 settings, worst |z| {worst:.2} (limit 3){}; {secs:.1}s (limit 60s)",
            if misses.is_empty() { String::new() } else { format!("; off: {}", misses.join(", ")) }
        ),
    }
}

// 6. Latent confounder on an independent pair.
fn criterion_6() -> Outcome {
    let t0 = Instant::now();
    let mut ok = 0;
    let mut notes = Vec::new();
    for seed in 0..5u64 {
        let base = gen_graph(GraphKind::Random, 8, 0.3, seed).unwrap();
        let (full, latents) = add_latent_confounders(&base, 1, seed, PairFilter::Independent).unwrap();
        let cgm = make_neural_cgm(&full, 10, seed).unwrap();
        let targets: Vec<usize> = (0..8).collect();
        let data = generate_dataset(&cgm, 100_000, 512, &targets, seed, &latents).unwrap();
        let cfg = FitConfig { seed, confounders: true, ..Default::default() };
        let fit = fit(&data, &cfg).unwrap();
        let report = detect_confounders(fit.split.as_ref().unwrap(), 0.4).unwrap();
        let ch = full.children(latents[0]);
        let lc = report.score(ch[0], ch[1]).unwrap();
        let other = report
            .pairs
            .iter()
            .filter(|p| (p.i, p.j) != (ch[0], ch[1]))
            .map(|p| p.score)
            .fold(0.0, f64::max);
        let mut graph = fit.graph.clone();
        drop_flagged_edges(&mut graph, &report);
        let d = shd(&graph, &base).unwrap();
        if lc > 0.4 && other < 0.4 && d <= 1 {
            ok += 1;
        }
        notes.push(format!("s{seed}: lc {lc:.2} max-other {other:.2} shd {d}"));
    }
    let secs = t0.elapsed().as_secs_f64();
    Outcome {
        pass: ok >= 4 && secs <= 300.0,
        detail: format!("{ok}/5 seeds (need 4); {}; {secs:.0}s (limit 300s)", notes.join(", ")),
    }
}

// 7. Parsed networks and recovery on cancer.
fn criterion_7() -> Outcome {
    let t0 = Instant::now();
    let cancer = parse_bif(fixtures::CANCER).unwrap();
    let asia = parse_bif(fixtures::ASIA).unwrap();
    let sizes_ok = cancer.n() == 5 && asia.n() == 8;
    let mut zero = 0;
    let mut shds = Vec::new();
    for seed in 0..5u64 {
        let targets: Vec<usize> = (0..cancer.n()).collect();
        let data = generate_dataset(&cancer, 50_000, 512, &targets, seed, &[]).unwrap();
        let cfg = FitConfig { seed, epochs: 100, lambda_sparse: 0.002, ..Default::default() };
        let fit = fit(&data, &cfg).unwrap();
        let d = shd(&fit.graph, &cancer.graph).unwrap();
        if d == 0 {
            zero += 1;
        }
        shds.push(d);
    }
    let secs = t0.elapsed().as_secs_f64();
    Outcome {
        pass: sizes_ok && zero >= 4 && secs <= 600.0,
        detail: format!(
            "nodes cancer {} asia {}; cancer SHD 0 in {zero}/5 (need 4) {shds:?}; {secs:.0}s (limit 600s)",
            cancer.n(),
            asia.n()
        ),
    }
}

fn finite_difference_worst() -> f64 {
    let mut worst: f64 = 0.0;
    for seed in 0..3u64 {
        let mut r = rng::stream(seed, 0);
        let cards = [3, 2, 4, 5];
        let target = seed as usize;
        let mut est = MlpEstimator::<f64>::with_hidden(&cards, target, 8, &mut r).unwrap();
        let rows: Vec<u16> = (0..10u16).flat_map(|k| [k % 3, k % 2, (k * 3) % 4, (k * 7) % 5]).collect();
        let batch = Samples::from_rows(4, rows).unwrap();
        let masks: Vec<bool> = (0..10 * 3).map(|_| r.random_bool(0.6)).collect();
        let mut grad = vec![0.0; est.num_params()];
        est.nll_and_grad(&batch, &masks, &mut grad).unwrap();
        let mut scratch = vec![0.0; grad.len()];
        let h = 1e-5;
        for k in 0..est.num_params() {
            let orig = est.params()[k];
            est.params_mut()[k] = orig + h;
            let up = est.nll_and_grad(&batch, &masks, &mut scratch).unwrap();
            est.params_mut()[k] = orig - h;
            let down = est.nll_and_grad(&batch, &masks, &mut scratch).unwrap();
            est.params_mut()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            // entries whose true gradient is zero (masked inputs) compare absolutely
            let err = if fd.abs().max(grad[k].abs()) < 1e-8 {
                (fd - grad[k]).abs()
            } else {
                (fd - grad[k]).abs() / fd.abs().max(grad[k].abs())
            };
            worst = worst.max(err);
        }
    }
    worst
}

fn random_params(r: &mut rng::Rng, n: usize, scale: f64) -> EdgeParams {
    let mut p = EdgeParams::zeros(n);
    for i in 0..n {
        for j in 0..n {
            if i != j {
                p.set_gamma(i, j, r.random_range(-scale..scale));
            }
            if i < j {
                p.set_theta(i, j, r.random_range(-scale..scale));
            }
        }
    }
    p
}

// 8. Property suites.
fn criterion_8() -> Outcome {
    let t0 = Instant::now();
    let mut parts = Vec::new();
    let mut pass = true;

    let fd = finite_difference_worst();
    pass &= fd <= 1e-4;
    parts.push(format!("finite differences worst rel err {fd:.1e}"));

    let mut r = rng::stream(8, 0);
    let mut cyclic = 0;
    for _ in 0..10_000 {
        let n = r.random_range(2..=12);
        let p = random_params(&mut r, n, 6.0);
        let vars = CausalGraph::empty(n, 2).unwrap().vars().to_vec();
        let mode = if n <= 7 { OrderMode::Exhaustive } else { OrderMode::Greedy };
        let (_, g) = enforce_acyclic_order(&p, &vars, mode).unwrap();
        if !is_acyclic(&g) {
            cyclic += 1;
        }
    }
    pass &= cyclic == 0;
    parts.push(format!("DAG fuzz 10000 params, {cyclic} cyclic"));

    let mut mismatched = 0;
    for _ in 0..100 {
        let n = r.random_range(2..=7);
        let p = random_params(&mut r, n, 4.0);
        let vars = CausalGraph::empty(n, 2).unwrap().vars().to_vec();
        let (ex, _) = enforce_acyclic_order(&p, &vars, OrderMode::Exhaustive).unwrap();
        let (gr, _) = enforce_acyclic_order(&p, &vars, OrderMode::Greedy).unwrap();
        let (a, b) = (order_score(&p, &ex.0), order_score(&p, &gr.0));
        if (a - b).abs() > 1e-9 * (1.0 + a.abs()) {
            mismatched += 1;
        }
    }
    pass &= mismatched == 0;
    parts.push(format!("greedy vs exhaustive 100 instances, {mismatched} worse"));

    let g = gen_graph(GraphKind::Random, 6, 0.4, 8).unwrap();
    let cgm = make_neural_cgm(&g, 4, 8).unwrap();
    let targets: Vec<usize> = (0..6).collect();
    let data = generate_dataset(&cgm, 1000, 100, &targets, 8, &[]).unwrap();
    let cfg = FitConfig {
        epochs: 4,
        dist_iters: 50,
        graph_iters: 50,
        partial: true,
        confounders: true,
        theta_freeze: true,
        theta_stage_iters: 20,
        seed: 8,
        ..Default::default()
    };
    let models = mlp_models(&data, &cfg).unwrap();
    let mut state = GraphFitState::new(6, &cfg);
    let mut sr = rng::stream(8, 1);
    let mut broken = 0;
    for k in 0..300 {
        if k % 50 == 49 {
            theta_stage(&models, &data, &mut state, &cfg, &mut sr).unwrap();
        } else {
            graph_fit_step(&models, &data, &mut state, &cfg, &mut sr).unwrap();
        }
        if !state.params.is_antisymmetric() {
            broken += 1;
        }
    }
    pass &= broken == 0;
    parts.push(format!("theta antisymmetry over 300 steps, {broken} violations"));

    let dir = tempfile::tempdir().unwrap();
    write_dataset(&data, dir.path()).unwrap();
    let same = read_dataset(dir.path()).map(|d| d == data).unwrap_or(false);
    pass &= same;
    parts.push(format!("dataset round trip {}", if same { "exact" } else { "differs" }));

    let a = fit(&data, &cfg).unwrap();
    let b = fit(&data, &cfg).unwrap();
    let det = a.params == b.params && a.trace == b.trace;
    pass &= det;
    parts.push(format!("seeded fit {}", if det { "bit-exact" } else { "differs" }));

    Outcome {
        pass,
        detail: format!("{}; {:.1}s", parts.join("; "), t0.elapsed().as_secs_f64()),
    }
}

fn main() {
    let args: Vec<String> = std::env::args().skip(1).collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let picked: Vec<usize> = args.iter().filter_map(|a| a.parse().ok()).filter(|k| (1..=8).contains(k)).collect();
    let strict = std::env::var("ACCEPTANCE_STRICT").is_ok_and(|v| v != "0");
    let criteria: [(usize, fn() -> Outcome); 8] = [
        (1, criterion_1),
        (2, criterion_2),
        (3, criterion_3),
        (4, criterion_4),
        (5, criterion_5),
        (6, criterion_6),
        (7, criterion_7),
        (8, criterion_8),
    ];
    let mut unexpected = Vec::new();
    let mut failed = Vec::new();
    for (k, run) in criteria {
        if !picked.is_empty() && !picked.contains(&k) {
            continue;
        }
        let o = run();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        let known = !o.pass && DOCUMENTED_SHORTFALLS.contains(&k);
        out(&format!(
            "criterion {k}: {tag}{} | {}",
            if known { " (documented shortfall)" } else { "" },
            o.detail
        ));
        if !o.pass {
            failed.push(k);
            if !known {
                unexpected.push(k);
            }
        }
    }
    out(&format!("acceptance: failed {failed:?}, unexpected {unexpected:?}"));
    if !unexpected.is_empty() || (strict && !failed.is_empty()) {
        std::process::exit(1);
    }
}
