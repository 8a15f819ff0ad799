//! Structure fitting: alternate between training the conditional
//! estimators on observational data and updating the edge logits from
//! interventional data.
//!
//! One graph-fitting step picks an intervened variable `t`, draws a batch
//! from its block and `K` adjacency matrices from the current edge
//! probabilities, and scores every variable under every sampled parent set.
//! For each pair `(i, j)` the sampled graphs split into those with and
//! without `i → j`; the difference of the two average losses drives `γ_ij`,
//! and for `i = t` it also drives the orientation `θ_tj`.

use std::collections::HashMap;

use rand::seq::IndexedRandom;
use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::confound::SplitGamma;
use crate::error::{Error, Result};
use crate::graph::{predict_graph, shd, CausalGraph, EdgeParams};
use crate::model::{AdamState, MlpEstimator, Optimizer, TableEstimator};
use crate::rng::{self, sigmoid, sigmoid_grad, Rng};
use crate::scm::{Dataset, Samples};

/// Log-probabilities are clamped at this floor before entering any
/// graph-fitting statistic.
pub const LOG_PROB_FLOOR: f64 = -30.0;

/// A conditional model `p(X_target | X_S)` usable during graph fitting.
pub trait ConditionalModel: Send + Sync {
    fn target(&self) -> usize;

    /// `log p(x_target | x_S)` for each row, where `S` holds the variables
    /// whose `parent_mask` entry is set (the target's own entry is ignored).
    fn log_probs(&self, rows: &Samples, parent_mask: &[bool], out: &mut [f64]);

    /// Whether [`ConditionalModel::fit_step`] does anything.
    fn is_trainable(&self) -> bool {
        false
    }

    /// One distribution-fitting update on `batch`; returns the mean NLL, or
    /// `None` for exact models.
    fn fit_step(&mut self, _batch: &Samples, _edges: &EdgeParams, _rng: &mut Rng) -> Result<Option<f64>> {
        Ok(None)
    }
}

impl ConditionalModel for TableEstimator {
    fn target(&self) -> usize {
        TableEstimator::target(self)
    }

    fn log_probs(&self, rows: &Samples, parent_mask: &[bool], out: &mut [f64]) {
        TableEstimator::log_probs(self, rows, parent_mask, out)
    }
}

/// A network estimator together with its optimizer state.
#[derive(Clone, Debug)]
pub struct MlpModel {
    pub est: MlpEstimator<f32>,
    pub opt: AdamState,
}

impl MlpModel {
    pub fn new(cards: &[usize], target: usize, lr: f64, weight_decay: f64, rng: &mut Rng) -> Result<Self> {
        let est = MlpEstimator::new(cards, target, rng)?;
        let opt = AdamState::new(est.num_params(), lr, (0.9, 0.999), 1e-8, weight_decay);
        Ok(MlpModel { est, opt })
    }
}

impl ConditionalModel for MlpModel {
    fn target(&self) -> usize {
        self.est.target()
    }

    fn log_probs(&self, rows: &Samples, parent_mask: &[bool], out: &mut [f64]) {
        let mask = crate::model::InputMask(self.est.inputs().iter().map(|&m| parent_mask[m]).collect());
        self.est.log_probs_inputs(rows, &mask, out)
    }

    fn is_trainable(&self) -> bool {
        true
    }

    fn fit_step(&mut self, batch: &Samples, edges: &EdgeParams, rng: &mut Rng) -> Result<Option<f64>> {
        self.est.train_step(batch, edges, &mut self.opt, rng).map(Some)
    }
}

/// Training hyperparameters. Missing keys in a config file take these defaults.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FitConfig {
    pub epochs: usize,
    /// Distribution-fitting iterations per epoch.
    pub dist_iters: usize,
    /// Graph-fitting iterations per epoch.
    pub graph_iters: usize,
    /// Adjacency samples per graph-fitting step.
    pub graph_samples: usize,
    pub batch_size: usize,
    pub lambda_sparse: f64,
    pub lr_gamma: f64,
    pub lr_theta: f64,
    pub betas_gamma: (f64, f64),
    pub betas_theta: (f64, f64),
    pub model_lr: f64,
    pub model_weight_decay: f64,
    /// Replace every second graph-fitting stage by a θ-only stage.
    pub theta_freeze: bool,
    pub theta_stage_iters: usize,
    /// Paired samples per variable in a θ-only step.
    pub theta_stage_samples: usize,
    /// Also update orientations between pairs of non-intervened variables.
    pub partial: bool,
    pub partial_theta_lr_factor: f64,
    /// Split γ into intervention/observation halves for confounder scoring.
    pub confounders: bool,
    pub seed: u64,
    /// Worker threads for per-variable work. Results do not depend on it.
    pub threads: usize,
}

impl Default for FitConfig {
    fn default() -> Self {
        FitConfig {
            epochs: 30,
            dist_iters: 1000,
            graph_iters: 100,
            graph_samples: 100,
            batch_size: 128,
            lambda_sparse: 0.004,
            lr_gamma: 2e-2,
            lr_theta: 1e-1,
            betas_gamma: (0.9, 0.9),
            betas_theta: (0.9, 0.999),
            model_lr: 5e-3,
            model_weight_decay: 1e-4,
            theta_freeze: false,
            theta_stage_iters: 100,
            theta_stage_samples: 2,
            partial: false,
            partial_theta_lr_factor: 0.1,
            confounders: false,
            seed: 0,
            threads: 1,
        }
    }
}

impl FitConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(m.into()));
        if self.graph_samples < 2 {
            return bad("graph_samples must be at least 2");
        }
        if !(self.lambda_sparse >= 0.0) {
            return bad("lambda_sparse must be non-negative");
        }
        for (name, lr) in [
            ("lr_gamma", self.lr_gamma),
            ("lr_theta", self.lr_theta),
            ("model_lr", self.model_lr),
            ("partial_theta_lr_factor", self.partial_theta_lr_factor),
        ] {
            if !(lr > 0.0) {
                return Err(Error::Config(format!("{name} must be positive")));
            }
        }
        for (a, b) in [self.betas_gamma, self.betas_theta] {
            if !(0.0..1.0).contains(&a) || !(0.0..1.0).contains(&b) {
                return bad("betas must lie in [0, 1)");
            }
        }
        if self.batch_size == 0 {
            return bad("batch_size must be positive");
        }
        if self.theta_freeze && self.theta_stage_samples == 0 {
            return bad("theta_stage_samples must be positive");
        }
        if self.model_weight_decay < 0.0 {
            return bad("model_weight_decay must be non-negative");
        }
        Ok(())
    }
}

/// One sampled adjacency matrix.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct GraphSample {
    n: usize,
    adj: Vec<bool>,
}

impl GraphSample {
    pub fn from_adjacency(n: usize, adj: Vec<bool>) -> Result<Self> {
        if adj.len() != n * n || (0..n).any(|i| adj[i * n + i]) {
            return Err(Error::param("adjacency must be square with an empty diagonal"));
        }
        Ok(GraphSample { n, adj })
    }

    #[inline]
    pub fn has(&self, i: usize, j: usize) -> bool {
        self.adj[i * self.n + j]
    }

    pub fn set(&mut self, i: usize, j: usize, v: bool) {
        if i != j {
            self.adj[i * self.n + j] = v;
        }
    }

    /// Column `j` as a full-length parent mask.
    pub fn column(&self, j: usize) -> Vec<bool> {
        (0..self.n).map(|i| self.has(i, j)).collect()
    }
}

/// `k` independent draws of `C_ij ~ Ber(σ(γ_ij)σ(θ_ij))`.
pub fn sample_graphs(params: &EdgeParams, k: usize, rng: &mut Rng) -> Vec<GraphSample> {
    let n = params.n();
    let probs: Vec<f64> = (0..n * n).map(|x| params.edge_prob(x / n, x % n)).collect();
    (0..k)
        .map(|_| GraphSample {
            n,
            adj: probs.iter().map(|&p| p > 0.0 && rng.random::<f64>() < p).collect(),
        })
        .collect()
}

/// Runs `f(j)` for every `j` in `0..n` on up to `threads` workers; results
/// come back in index order regardless of the split.
fn par_map<R: Send>(n: usize, threads: usize, f: impl Fn(usize) -> R + Sync) -> Vec<R> {
    let threads = threads.clamp(1, n.max(1));
    if threads == 1 {
        return (0..n).map(f).collect();
    }
    let chunk = n.div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = (0..threads)
            .map(|w| {
                let f = &f;
                s.spawn(move || (w * chunk..((w + 1) * chunk).min(n)).map(f).collect::<Vec<R>>())
            })
            .collect();
        handles
            .into_iter()
            .flat_map(|h| h.join().expect("worker panicked"))
            .collect()
    })
}

fn column_key(g: &GraphSample, j: usize) -> Vec<u64> {
    let mut key = vec![0u64; g.n.div_ceil(64)];
    for i in 0..g.n {
        if g.has(i, j) {
            key[i / 64] |= 1 << (i % 64);
        }
    }
    key
}

/// Batch-mean negative log-likelihood of every variable under every sampled
/// parent set, laid out `[k * n + j]`. Identical parent sets of a variable
/// are scored once. Variable `skip` (the intervened one) is left as NaN.
pub fn evaluate_graphs<M: ConditionalModel>(
    models: &[M],
    batch: &Samples,
    graphs: &[GraphSample],
    skip: Option<usize>,
    threads: usize,
) -> Vec<f64> {
    let n = models.len();
    let per_var = par_map(n, threads, |j| {
        let mut col = vec![f64::NAN; graphs.len()];
        if Some(j) == skip {
            return col;
        }
        let mut seen: HashMap<Vec<u64>, f64> = HashMap::new();
        let mut lp = vec![0.0; batch.rows()];
        for (k, g) in graphs.iter().enumerate() {
            let key = column_key(g, j);
            col[k] = *seen.entry(key).or_insert_with(|| {
                models[j].log_probs(batch, &g.column(j), &mut lp);
                -lp.iter().map(|&x| x.max(LOG_PROB_FLOOR)).sum::<f64>() / lp.len() as f64
            });
        }
        col
    });
    let mut out = vec![f64::NAN; graphs.len() * n];
    for (j, col) in per_var.into_iter().enumerate() {
        for (k, v) in col.into_iter().enumerate() {
            out[k * n + j] = v;
        }
    }
    out
}

/// Per ordered pair `(i, j)`: summed NLL of `X_j` and graph counts, split by
/// whether the sampled graph contained `i → j`.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeStats {
    n: usize,
    sum_with: Vec<f64>,
    cnt_with: Vec<u32>,
    sum_without: Vec<f64>,
    cnt_without: Vec<u32>,
}

impl EdgeStats {
    /// Groups per-graph losses (`nll[k * n + j]`) by each graph's entries.
    pub fn from_nll(graphs: &[GraphSample], nll: &[f64], n: usize) -> Self {
        let mut s = EdgeStats {
            n,
            sum_with: vec![0.0; n * n],
            cnt_with: vec![0; n * n],
            sum_without: vec![0.0; n * n],
            cnt_without: vec![0; n * n],
        };
        for (k, g) in graphs.iter().enumerate() {
            for j in 0..n {
                let l = nll[k * n + j];
                if l.is_nan() {
                    continue;
                }
                for i in 0..n {
                    if i == j {
                        continue;
                    }
                    let x = i * n + j;
                    if g.has(i, j) {
                        s.sum_with[x] += l;
                        s.cnt_with[x] += 1;
                    } else {
                        s.sum_without[x] += l;
                        s.cnt_without[x] += 1;
                    }
                }
            }
        }
        s
    }

    pub fn n(&self) -> usize {
        self.n
    }

    pub fn count_with(&self, i: usize, j: usize) -> u32 {
        self.cnt_with[i * self.n + j]
    }

    pub fn count_without(&self, i: usize, j: usize) -> u32 {
        self.cnt_without[i * self.n + j]
    }

    /// Mean NLL of `X_j` over graphs containing `i → j`, if any.
    pub fn mean_with(&self, i: usize, j: usize) -> Option<f64> {
        let x = i * self.n + j;
        (self.cnt_with[x] > 0).then(|| self.sum_with[x] / f64::from(self.cnt_with[x]))
    }

    pub fn mean_without(&self, i: usize, j: usize) -> Option<f64> {
        let x = i * self.n + j;
        (self.cnt_without[x] > 0).then(|| self.sum_without[x] / f64::from(self.cnt_without[x]))
    }

    /// `mean_with − mean_without` when both groups are non-empty.
    pub fn difference(&self, i: usize, j: usize) -> Option<f64> {
        Some(self.mean_with(i, j)? - self.mean_without(i, j)?)
    }
}

/// Scores all variables under all graphs and groups the results per pair.
pub fn collect_edge_stats<M: ConditionalModel>(models: &[M], batch: &Samples, graphs: &[GraphSample]) -> EdgeStats {
    let nll = evaluate_graphs(models, batch, graphs, None, 1);
    EdgeStats::from_nll(graphs, &nll, models.len())
}

/// Gradient of the edge-existence logits and the entries it is defined
/// for. Column `target` and pairs with an empty group are excluded.
pub fn gamma_gradient_masked(stats: &EdgeStats, params: &EdgeParams, lambda: f64, target: usize) -> (Vec<f64>, Vec<bool>) {
    let n = params.n();
    let mut grad = vec![0.0; n * n];
    let mut mask = vec![false; n * n];
    for i in 0..n {
        for j in 0..n {
            if i == j || j == target {
                continue;
            }
            if let Some(d) = stats.difference(i, j) {
                grad[i * n + j] = sigmoid_grad(params.gamma(i, j)) * sigmoid(params.theta(i, j)) * (d + lambda);
                mask[i * n + j] = true;
            }
        }
    }
    (grad, mask)
}

/// `σ'(γ_ij)·σ(θ_ij)·(L_{i→j} − L_{i↛j} + λ)`, zero where undefined.
///
/// ```
/// use causalfit::fit::{gamma_gradient, EdgeStats, GraphSample};
/// use causalfit::graph::EdgeParams;
/// let with = GraphSample::from_adjacency(2, vec![false, true, false, false]).unwrap();
/// let without = GraphSample::from_adjacency(2, vec![false; 4]).unwrap();
/// // per-graph NLL of X0 and X1
/// let stats = EdgeStats::from_nll(&[with, without], &[0.5, 1.0, 0.5, 1.2], 2);
/// let g = gamma_gradient(&stats, &EdgeParams::zeros(2), 0.004, 0);
/// assert!((g[1] - (-0.0245)).abs() < 1e-12);
/// ```
pub fn gamma_gradient(stats: &EdgeStats, params: &EdgeParams, lambda: f64, target: usize) -> Vec<f64> {
    gamma_gradient_masked(stats, params, lambda, target).0
}

/// Orientation gradient from an intervention on `target`: only row
/// `target` and its mirror column are non-zero, and the result is
/// antisymmetric.
pub fn theta_gradient_masked(stats: &EdgeStats, params: &EdgeParams, target: usize) -> (Vec<f64>, Vec<bool>) {
    let n = params.n();
    let mut grad = vec![0.0; n * n];
    let mut mask = vec![false; n * n];
    let t = target;
    for j in 0..n {
        if j == t {
            continue;
        }
        if let Some(d) = stats.difference(t, j) {
            let g = sigmoid_grad(params.theta(t, j)) * sigmoid(params.gamma(t, j)) * d;
            grad[t * n + j] = g;
            grad[j * n + t] = -g;
            mask[t * n + j] = true;
            mask[j * n + t] = true;
        }
    }
    (grad, mask)
}

/// See [`theta_gradient_masked`].
pub fn theta_gradient(stats: &EdgeStats, params: &EdgeParams, target: usize) -> Vec<f64> {
    theta_gradient_masked(stats, params, target).0
}

/// Orientation gradient for pairs where neither variable was intervened,
/// estimated under an intervention on a third variable:
/// `σ'(θ_ij)[σ(γ_ij)(L_{i→j}(X_j) − L_{i↛j}(X_j)) − σ(γ_ji)(L_{j→i}(X_i) − L_{j↛i}(X_i))]`.
pub fn partial_theta_gradient(stats: &EdgeStats, params: &EdgeParams, intervened: &[bool]) -> (Vec<f64>, Vec<bool>) {
    let n = params.n();
    let mut grad = vec![0.0; n * n];
    let mut mask = vec![false; n * n];
    for i in 0..n {
        for j in i + 1..n {
            if intervened[i] || intervened[j] {
                continue;
            }
            if let (Some(dij), Some(dji)) = (stats.difference(i, j), stats.difference(j, i)) {
                let g = sigmoid_grad(params.theta(i, j))
                    * (sigmoid(params.gamma(i, j)) * dij - sigmoid(params.gamma(j, i)) * dji);
                grad[i * n + j] = g;
                grad[j * n + i] = -g;
                mask[i * n + j] = true;
                mask[j * n + i] = true;
            }
        }
    }
    (grad, mask)
}

/// Score-function estimator with a ratio baseline, kept for comparison:
/// `σ(θ_ij)·(mean_k[(σ(γ_ij) − C^k_ij)·L^k_j] / mean_k[L^k_j] + λ)`.
/// Entries with a zero denominator are reported as 0.
pub fn baseline_gamma_gradient(graphs: &[GraphSample], nll: &[f64], params: &EdgeParams, lambda: f64) -> Vec<f64> {
    let n = params.n();
    let k = graphs.len() as f64;
    let mut grad = vec![0.0; n * n];
    for j in 0..n {
        let denom: f64 = (0..graphs.len()).map(|g| nll[g * n + j]).sum::<f64>() / k;
        if denom == 0.0 || denom.is_nan() {
            continue;
        }
        for i in 0..n {
            if i == j {
                continue;
            }
            let sg = sigmoid(params.gamma(i, j));
            let num: f64 = graphs
                .iter()
                .enumerate()
                .map(|(g, c)| (sg - f64::from(u8::from(c.has(i, j)))) * nll[g * n + j])
                .sum::<f64>()
                / k;
            grad[i * n + j] = sigmoid(params.theta(i, j)) * (num / denom + lambda);
        }
    }
    grad
}

fn upper_index(n: usize, i: usize, j: usize) -> usize {
    i * n - i * (i + 1) / 2 + (j - i - 1)
}

/// Edge logits and their optimizer states.
#[derive(Clone, Debug)]
pub struct GraphFitState {
    pub params: EdgeParams,
    gamma_opt: Optimizer,
    theta_opt: Optimizer,
    partial_opt: Optimizer,
    pub split: Option<SplitGamma>,
}

impl GraphFitState {
    /// Zero logits with Adam states configured from `config`.
    pub fn new(n: usize, config: &FitConfig) -> Self {
        let m = n * n.saturating_sub(1) / 2;
        GraphFitState {
            params: EdgeParams::zeros(n),
            gamma_opt: Optimizer::Adam(AdamState::new(n * n, config.lr_gamma, config.betas_gamma, 1e-8, 0.0)),
            theta_opt: Optimizer::Adam(AdamState::new(m, config.lr_theta, config.betas_theta, 1e-8, 0.0)),
            partial_opt: Optimizer::Adam(AdamState::new(
                m,
                config.lr_theta * config.partial_theta_lr_factor,
                config.betas_theta,
                1e-8,
                0.0,
            )),
            split: config
                .confounders
                .then(|| SplitGamma::new(n, config.lr_gamma, config.betas_gamma)),
        }
    }

    fn apply_gamma(&mut self, grad: &[f64], mask: &[bool], target: usize) -> Result<()> {
        let n = self.params.n();
        if let Some(sg) = &mut self.split {
            sg.split_update(grad, mask, target)?;
            for i in 0..n {
                for j in 0..n {
                    self.params.set_gamma(i, j, sg.gamma(i, j));
                }
            }
            return Ok(());
        }
        let mut g = self.params.gamma_matrix().to_vec();
        self.gamma_opt.update_masked(&mut g, grad, mask)?;
        for i in 0..n {
            for j in 0..n {
                self.params.set_gamma(i, j, g[i * n + j]);
            }
        }
        Ok(())
    }

    fn apply_theta(&mut self, grad: &[f64], mask: &[bool], partial: bool) -> Result<()> {
        let n = self.params.n();
        let m = n * n.saturating_sub(1) / 2;
        let mut vals = vec![0.0; m];
        let mut g = vec![0.0; m];
        let mut mk = vec![false; m];
        for i in 0..n {
            for j in i + 1..n {
                let u = upper_index(n, i, j);
                vals[u] = self.params.theta(i, j);
                g[u] = grad[i * n + j];
                mk[u] = mask[i * n + j];
            }
        }
        let opt = if partial { &mut self.partial_opt } else { &mut self.theta_opt };
        opt.update_masked(&mut vals, &g, &mk)?;
        for i in 0..n {
            for j in i + 1..n {
                self.params.set_theta(i, j, vals[upper_index(n, i, j)]);
            }
        }
        Ok(())
    }
}

/// What a graph-fitting step did.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StepReport {
    pub target: usize,
    pub gamma_updates: usize,
    pub theta_updates: usize,
}

fn check_models<M: ConditionalModel>(models: &[M], dataset: &Dataset) -> Result<()> {
    if models.len() != dataset.n() || models.iter().enumerate().any(|(j, m)| m.target() != j) {
        return Err(Error::Config("need one model per variable, in variable order".into()));
    }
    if dataset.ints.is_empty() {
        return Err(Error::Config("dataset has no interventional data".into()));
    }
    Ok(())
}

fn draw_batch(block: &Samples, size: usize, rng: &mut Rng) -> Result<Samples> {
    if block.rows() == 0 {
        return Err(Error::Config("empty sample block".into()));
    }
    let idx: Vec<usize> = (0..size).map(|_| rng.random_range(0..block.rows())).collect();
    Ok(block.select(&idx))
}

fn draw_target(dataset: &Dataset, rng: &mut Rng) -> Result<usize> {
    dataset
        .intervened_targets()
        .choose(rng)
        .copied()
        .ok_or_else(|| Error::Config("dataset has no interventional data".into()))
}

/// One graph-fitting step.
pub fn graph_fit_step<M: ConditionalModel>(
    models: &[M],
    dataset: &Dataset,
    state: &mut GraphFitState,
    config: &FitConfig,
    rng: &mut Rng,
) -> Result<StepReport> {
    check_models(models, dataset)?;
    let n = dataset.n();
    let t = draw_target(dataset, rng)?;
    let batch = draw_batch(&dataset.ints[&t].samples, config.batch_size, rng)?;
    let graphs = sample_graphs(&state.params, config.graph_samples, rng);
    let nll = evaluate_graphs(models, &batch, &graphs, Some(t), config.threads);
    let stats = EdgeStats::from_nll(&graphs, &nll, n);

    let (gg, gm) = gamma_gradient_masked(&stats, &state.params, config.lambda_sparse, t);
    let (tg, tm) = theta_gradient_masked(&stats, &state.params, t);
    let partial = if config.partial {
        let mut intervened = vec![false; n];
        for k in dataset.intervened_targets() {
            intervened[k] = true;
        }
        Some(partial_theta_gradient(&stats, &state.params, &intervened))
    } else {
        None
    };
    // all gradients come from the same parameters, then get applied
    state.apply_gamma(&gg, &gm, t)?;
    state.apply_theta(&tg, &tm, false)?;
    if let Some((pg, pm)) = partial {
        state.apply_theta(&pg, &pm, true)?;
    }
    Ok(StepReport {
        target: t,
        gamma_updates: gm.iter().filter(|&&b| b).count(),
        theta_updates: tm.iter().filter(|&&b| b).count() / 2,
    })
}

/// Orientation gradient for row `target` from paired samples: each pair
/// shares one sampled graph and differs only in entry `(target, j)`.
pub fn paired_theta_gradient<M: ConditionalModel>(
    models: &[M],
    batch: &Samples,
    params: &EdgeParams,
    target: usize,
    pairs: usize,
    rng: &mut Rng,
) -> (Vec<f64>, Vec<bool>) {
    let n = params.n();
    let t = target;
    let mut grad = vec![0.0; n * n];
    let mut mask = vec![false; n * n];
    if pairs == 0 {
        return (grad, mask);
    }
    let graphs = sample_graphs(params, pairs, rng);
    let mut lp = vec![0.0; batch.rows()];
    let mut nll = |j: usize, col: &[bool]| {
        models[j].log_probs(batch, col, &mut lp);
        -lp.iter().map(|&x| x.max(LOG_PROB_FLOOR)).sum::<f64>() / lp.len() as f64
    };
    for j in 0..n {
        if j == t {
            continue;
        }
        let mut diff = 0.0;
        for g in &graphs {
            let mut col = g.column(j);
            col[t] = true;
            let with = nll(j, &col);
            col[t] = false;
            diff += with - nll(j, &col);
        }
        let d = diff / pairs as f64;
        let v = sigmoid_grad(params.theta(t, j)) * sigmoid(params.gamma(t, j)) * d;
        grad[t * n + j] = v;
        grad[j * n + t] = -v;
        mask[t * n + j] = true;
        mask[j * n + t] = true;
    }
    (grad, mask)
}

/// θ-only stage: γ stays fixed, θ is updated from paired samples.
pub fn theta_stage<M: ConditionalModel>(
    models: &[M],
    dataset: &Dataset,
    state: &mut GraphFitState,
    config: &FitConfig,
    rng: &mut Rng,
) -> Result<Vec<StepReport>> {
    check_models(models, dataset)?;
    let mut reports = Vec::with_capacity(config.theta_stage_iters);
    for _ in 0..config.theta_stage_iters {
        let t = draw_target(dataset, rng)?;
        let batch = draw_batch(&dataset.ints[&t].samples, config.batch_size, rng)?;
        let (g, m) = paired_theta_gradient(models, &batch, &state.params, t, config.theta_stage_samples, rng);
        state.apply_theta(&g, &m, false)?;
        reports.push(StepReport {
            target: t,
            gamma_updates: 0,
            theta_updates: m.iter().filter(|&&b| b).count() / 2,
        });
    }
    Ok(reports)
}

/// One line of the training trace.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochTrace {
    pub epoch: usize,
    /// Mean distribution-fitting NLL over the epoch; absent for exact models.
    pub mean_nll: Option<f64>,
    pub edges: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub shd: Option<usize>,
}

#[derive(Clone, Debug)]
pub struct FitOutput {
    pub params: EdgeParams,
    /// Thresholded prediction, not necessarily acyclic.
    pub graph: CausalGraph,
    pub trace: Vec<EpochTrace>,
    pub split: Option<SplitGamma>,
}

/// Fresh network estimators for every variable of `dataset`.
pub fn mlp_models(dataset: &Dataset, config: &FitConfig) -> Result<Vec<MlpModel>> {
    let cards = dataset.cards();
    (0..cards.len())
        .map(|j| {
            let mut r = rng::stream(config.seed, 0x2000 + j as u64);
            MlpModel::new(&cards, j, config.model_lr, config.model_weight_decay, &mut r)
        })
        .collect()
}

/// Fits network estimators and edge logits from scratch.
pub fn fit(dataset: &Dataset, config: &FitConfig) -> Result<FitOutput> {
    config.validate()?;
    let mut models = mlp_models(dataset, config)?;
    fit_with_models(&mut models, dataset, config, None)
}

/// Runs the alternating loop with caller-provided models. `truth`, if
/// given, adds a per-epoch SHD to the trace.
pub fn fit_with_models<M: ConditionalModel>(
    models: &mut [M],
    dataset: &Dataset,
    config: &FitConfig,
    truth: Option<&CausalGraph>,
) -> Result<FitOutput> {
    config.validate()?;
    dataset.validate()?;
    check_models(models, dataset)?;
    if let Some(t) = truth {
        if t.n() != dataset.n() {
            return Err(Error::Config("truth graph size does not match the dataset".into()));
        }
    }
    let n = dataset.n();
    let trainable = models.iter().any(|m| m.is_trainable());
    if trainable && dataset.obs.rows() == 0 {
        return Err(Error::Config("trainable models need observational data".into()));
    }
    let mut state = GraphFitState::new(n, config);
    let mut batch_rng = rng::stream(config.seed, 0x5000);
    let mut graph_rng = rng::stream(config.seed, 0x6000);
    let mut model_rngs: Vec<Rng> = (0..n).map(|j| rng::stream(config.seed, 0x1000 + j as u64)).collect();
    let mut trace = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut nll_sum = 0.0;
        let mut nll_count = 0usize;
        if trainable {
            for _ in 0..config.dist_iters {
                let batch = draw_batch(&dataset.obs, config.batch_size, &mut batch_rng)?;
                let losses = train_all(models, &mut model_rngs, &batch, &state.params, config.threads)?;
                for l in losses.into_iter().flatten() {
                    nll_sum += l;
                    nll_count += 1;
                }
            }
        }
        if config.theta_freeze && epoch % 2 == 1 {
            theta_stage(models, dataset, &mut state, config, &mut graph_rng)?;
        } else {
            for _ in 0..config.graph_iters {
                graph_fit_step(models, dataset, &mut state, config, &mut graph_rng)?;
            }
        }
        let pred = predict_graph(&state.params, &dataset.meta)?;
        let entry = EpochTrace {
            epoch,
            mean_nll: (nll_count > 0).then(|| nll_sum / nll_count as f64),
            edges: pred.edge_count(),
            shd: truth.map(|t| shd(&pred, t)).transpose()?,
        };
        log::info!("{}", serde_json::to_string(&entry).unwrap_or_default());
        trace.push(entry);
    }
    let graph = predict_graph(&state.params, &dataset.meta)?;
    Ok(FitOutput {
        params: state.params,
        graph,
        trace,
        split: state.split,
    })
}

fn train_all<M: ConditionalModel>(
    models: &mut [M],
    rngs: &mut [Rng],
    batch: &Samples,
    params: &EdgeParams,
    threads: usize,
) -> Result<Vec<Option<f64>>> {
    let threads = threads.clamp(1, models.len().max(1));
    if threads == 1 {
        return models
            .iter_mut()
            .zip(rngs.iter_mut())
            .map(|(m, r)| m.fit_step(batch, params, r))
            .collect();
    }
    let total = models.len();
    let chunk = total.div_ceil(threads);
    std::thread::scope(|s| {
        let handles: Vec<_> = models
            .chunks_mut(chunk)
            .zip(rngs.chunks_mut(chunk))
            .map(|(ms, rs)| {
                s.spawn(move || {
                    ms.iter_mut()
                        .zip(rs.iter_mut())
                        .map(|(m, r)| m.fit_step(batch, params, r))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(total);
        for h in handles {
            out.extend(h.join().expect("worker panicked")?);
        }
        Ok(out)
    })
}

/// Spread of both γ estimators over repeated graph draws.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EdgeVariance {
    pub i: usize,
    pub j: usize,
    /// With/without-edge difference estimator.
    pub mean: f64,
    pub std: f64,
    pub baseline_mean: f64,
    pub baseline_std: f64,
    /// Factor applied to the baseline so both means agree.
    pub scale: f64,
    /// `|scale| · baseline_std`.
    pub scaled_baseline_std: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VarianceReport {
    pub target: usize,
    pub k: usize,
    pub reps: usize,
    pub edges: Vec<EdgeVariance>,
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, v.sqrt())
}

/// Draws `reps` fresh sets of `k` graphs for one fixed intervention batch
/// and compares the spread of [`gamma_gradient`] with the mean-scaled
/// [`baseline_gamma_gradient`] for every pair `(i, j)` with `j ≠ target`.
pub fn gradient_variance_probe<M: ConditionalModel>(
    models: &[M],
    dataset: &Dataset,
    params: &EdgeParams,
    k: usize,
    reps: usize,
    lambda: f64,
    batch_size: usize,
    rng: &mut Rng,
) -> Result<VarianceReport> {
    check_models(models, dataset)?;
    if reps < 30 {
        return Err(Error::Config(format!("need at least 30 repetitions, got {reps}")));
    }
    if k < 2 {
        return Err(Error::Config("need at least 2 graph samples".into()));
    }
    let n = dataset.n();
    let t = draw_target(dataset, rng)?;
    let batch = draw_batch(&dataset.ints[&t].samples, batch_size, rng)?;
    let mut split_diff = vec![Vec::with_capacity(reps); n * n];
    let mut base = vec![Vec::with_capacity(reps); n * n];
    for _ in 0..reps {
        let graphs = sample_graphs(params, k, rng);
        let nll = evaluate_graphs(models, &batch, &graphs, Some(t), 1);
        let stats = EdgeStats::from_nll(&graphs, &nll, n);
        let (g, m) = gamma_gradient_masked(&stats, params, lambda, t);
        let b = baseline_gamma_gradient(&graphs, &nll, params, lambda);
        for x in 0..n * n {
            if m[x] {
                split_diff[x].push(g[x]);
                base[x].push(b[x]);
            }
        }
    }
    let mut edges = Vec::new();
    for i in 0..n {
        for j in 0..n {
            let x = i * n + j;
            if i == j || j == t || split_diff[x].len() < 2 {
                continue;
            }
            let (em, es) = mean_std(&split_diff[x]);
            let (bm, bs) = mean_std(&base[x]);
            let scale = if bm != 0.0 { em / bm } else { f64::NAN };
            edges.push(EdgeVariance {
                i,
                j,
                mean: em,
                std: es,
                baseline_mean: bm,
                baseline_std: bs,
                scale,
                scaled_baseline_std: scale.abs() * bs,
            });
        }
    }
    Ok(VarianceReport { target: t, k, reps, edges })
}
