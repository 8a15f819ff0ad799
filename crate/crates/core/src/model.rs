//! Conditional distribution estimators `p(X_i | masked X_{-i})` and the
//! Adam optimizer that trains them.
//!
//! The network embeds each input category into 4 dimensions, applies one
//! hidden layer (width 64, leaky rectifier with slope 0.1) and a softmax
//! over the target's categories. A masked input contributes a zero
//! embedding, which is the same as skipping its first-layer contribution.
//!
//! First-layer contributions are computed per category once per parameter
//! version: `T_m[v] = W1[:, block m] · emb_m[v]`, so a forward pass is
//! `b1 + Σ_{unmasked m} T_m[x_m]`. The first-layer weights are stored
//! column-major so every per-category product is a contiguous axpy.

use std::collections::HashMap;
use std::fmt::Debug;
use std::sync::{Arc, Mutex};

use num_traits::Float;
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::graph::EdgeParams;
use crate::rng::Rng;
use crate::scm::{exact_joint, Cgm, JointTable, Samples};

pub const EMBED_DIM: usize = 4;
pub const HIDDEN: usize = 64;
pub const LEAKY_SLOPE: f64 = 0.1;

/// Floating-point type the estimator is generic over. `f32` for training,
/// `f64` for finite-difference gradient checks.
pub trait Real:
    Float + Default + Debug + Send + Sync + 'static + std::iter::Sum + std::ops::AddAssign + std::ops::SubAssign
{
    fn of(x: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn of(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    #[inline]
    fn of(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// One flag per estimator input (the `N-1` variables other than the
/// target, in index order); `true` means the input is visible.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InputMask(pub Vec<bool>);

/// Adam with decoupled weight decay and a step counter per parameter, so
/// that masked updates leave untouched entries (and their bias correction)
/// exactly as they were.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub steps: Vec<u64>,
}

impl AdamState {
    pub fn new(len: usize, lr: f64, betas: (f64, f64), eps: f64, weight_decay: f64) -> Self {
        AdamState {
            lr,
            beta1: betas.0,
            beta2: betas.1,
            eps,
            weight_decay,
            m: vec![0.0; len],
            v: vec![0.0; len],
            steps: vec![0; len],
        }
    }

    /// Network defaults: lr 5e-3, betas (0.9, 0.999), eps 1e-8, weight decay 1e-4.
    pub fn for_network(len: usize) -> Self {
        Self::new(len, 5e-3, (0.9, 0.999), 1e-8, 1e-4)
    }

    pub fn len(&self) -> usize {
        self.m.len()
    }

    pub fn is_empty(&self) -> bool {
        self.m.is_empty()
    }

    /// Bias corrections `(1 − β1^t, 1 − β2^t)`, cached for the last `t` seen.
    #[inline]
    fn corrections(&self, t: u64, cache: &mut (u64, f64, f64)) -> (f64, f64) {
        if cache.0 != t {
            let ti = i32::try_from(t).unwrap_or(i32::MAX);
            *cache = (t, 1.0 - self.beta1.powi(ti), 1.0 - self.beta2.powi(ti));
        }
        (cache.1, cache.2)
    }

    #[inline]
    fn step_one<T: Real>(&mut self, k: usize, p: &mut T, g: f64, cache: &mut (u64, f64, f64)) {
        self.steps[k] += 1;
        let (c1, c2) = self.corrections(self.steps[k], cache);
        self.m[k] = self.beta1 * self.m[k] + (1.0 - self.beta1) * g;
        self.v[k] = self.beta2 * self.v[k] + (1.0 - self.beta2) * g * g;
        let mhat = self.m[k] / c1;
        let vhat = self.v[k] / c2;
        let mut x = p.to_f64();
        x -= self.lr * self.weight_decay * x;
        x -= self.lr * mhat / (vhat.sqrt() + self.eps);
        *p = T::of(x);
    }

    /// Updates every parameter.
    pub fn update<T: Real>(&mut self, params: &mut [T], grads: &[T]) -> Result<()> {
        if params.len() != self.len() || grads.len() != self.len() {
            return Err(Error::param(format!(
                "optimizer holds {} entries, got {} parameters and {} gradients",
                self.len(),
                params.len(),
                grads.len()
            )));
        }
        let mut cache = (0, 0.0, 0.0);
        for k in 0..params.len() {
            self.step_one(k, &mut params[k], grads[k].to_f64(), &mut cache);
        }
        Ok(())
    }

    /// Updates only entries with `mask[k]`; the rest keep their value,
    /// moments and step count.
    pub fn update_masked(&mut self, params: &mut [f64], grads: &[f64], mask: &[bool]) -> Result<()> {
        if params.len() != self.len() || grads.len() != self.len() || mask.len() != self.len() {
            return Err(Error::param("optimizer, parameter, gradient and mask sizes differ"));
        }
        let mut cache = (0, 0.0, 0.0);
        for k in 0..params.len() {
            if mask[k] {
                self.step_one(k, &mut params[k], grads[k], &mut cache);
            }
        }
        Ok(())
    }
}

/// Update rule for edge logits.
#[derive(Clone, Debug, PartialEq)]
pub enum Optimizer {
    Adam(AdamState),
    /// Plain gradient descent.
    Sgd { lr: f64 },
}

impl Optimizer {
    pub fn update_masked(&mut self, params: &mut [f64], grads: &[f64], mask: &[bool]) -> Result<()> {
        match self {
            Optimizer::Adam(a) => a.update_masked(params, grads, mask),
            Optimizer::Sgd { lr } => {
                if params.len() != grads.len() || mask.len() != grads.len() {
                    return Err(Error::param("parameter, gradient and mask sizes differ"));
                }
                for ((p, g), &m) in params.iter_mut().zip(grads).zip(mask) {
                    if m {
                        *p -= *lr * g;
                    }
                }
                Ok(())
            }
        }
    }
}

/// Masked-input network estimating `p(X_target | X_{-target})`.
#[derive(Clone, Debug)]
pub struct MlpEstimator<T: Real = f32> {
    target: usize,
    n: usize,
    inputs: Vec<usize>,
    in_cards: Vec<usize>,
    card: usize,
    hidden: usize,
    emb_off: Vec<usize>,
    w1_off: usize,
    b1_off: usize,
    w2_off: usize,
    b2_off: usize,
    params: Vec<T>,
    /// `T_m[v]` blocks, `hidden` values each, for the current parameters.
    tables: Vec<T>,
    table_off: Vec<usize>,
    tables_fresh: bool,
}

impl<T: Real> PartialEq for MlpEstimator<T> {
    fn eq(&self, other: &Self) -> bool {
        self.target == other.target
            && self.in_cards == other.in_cards
            && self.card == other.card
            && self.hidden == other.hidden
            && self.params == other.params
    }
}

#[inline]
fn leaky<T: Real>(x: T) -> T {
    if x > T::zero() {
        x
    } else {
        x * T::of(LEAKY_SLOPE)
    }
}

/// Dot product with eight independent partial sums so the loop vectorizes.
#[inline]
fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ac, bc) = (a.chunks_exact(8), b.chunks_exact(8));
    let tail: T = ac.remainder().iter().zip(bc.remainder()).map(|(&x, &y)| x * y).fold(T::zero(), |s, v| s + v);
    for (x, y) in ac.zip(bc) {
        for k in 0..8 {
            acc[k] += x[k] * y[k];
        }
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

impl<T: Real> MlpEstimator<T> {
    /// A freshly initialized estimator for variable `target` of a model
    /// with cardinalities `cards`. Linear layers use U(±1/√fan_in),
    /// embeddings N(0, 1).
    pub fn new(cards: &[usize], target: usize, rng: &mut Rng) -> Result<Self> {
        Self::with_hidden(cards, target, HIDDEN, rng)
    }

    pub fn with_hidden(cards: &[usize], target: usize, hidden: usize, rng: &mut Rng) -> Result<Self> {
        if target >= cards.len() {
            return Err(Error::param(format!("target {target} out of range")));
        }
        if cards.iter().any(|&c| c < 2) || hidden == 0 {
            return Err(Error::param("cardinalities must be at least 2 and hidden width positive"));
        }
        let inputs: Vec<usize> = (0..cards.len()).filter(|&m| m != target).collect();
        let in_cards: Vec<usize> = inputs.iter().map(|&m| cards[m]).collect();
        let card = cards[target];
        let mut off = 0;
        let mut emb_off = Vec::with_capacity(inputs.len());
        for &c in &in_cards {
            emb_off.push(off);
            off += c * EMBED_DIM;
        }
        let in_dim = EMBED_DIM * inputs.len();
        let w1_off = off;
        off += in_dim * hidden;
        let b1_off = off;
        off += hidden;
        let w2_off = off;
        off += card * hidden;
        let b2_off = off;
        off += card;

        let mut params = vec![T::zero(); off];
        for p in &mut params[..w1_off] {
            *p = T::of(StandardNormal.sample(rng));
        }
        let bound1 = 1.0 / (in_dim.max(1) as f64).sqrt();
        for p in &mut params[w1_off..w2_off] {
            *p = T::of(rng.random_range(-bound1..bound1));
        }
        let bound2 = 1.0 / (hidden as f64).sqrt();
        for p in &mut params[w2_off..] {
            *p = T::of(rng.random_range(-bound2..bound2));
        }

        let mut table_off = Vec::with_capacity(inputs.len());
        let mut t = 0;
        for &c in &in_cards {
            table_off.push(t);
            t += c * hidden;
        }
        let mut est = MlpEstimator {
            target,
            n: cards.len(),
            inputs,
            in_cards,
            card,
            hidden,
            emb_off,
            w1_off,
            b1_off,
            w2_off,
            b2_off,
            params,
            tables: vec![T::zero(); t],
            table_off,
            tables_fresh: false,
        };
        est.refresh_tables();
        Ok(est)
    }

    pub fn target(&self) -> usize {
        self.target
    }

    /// Indices of the input variables, in order.
    pub fn inputs(&self) -> &[usize] {
        &self.inputs
    }

    pub fn params(&self) -> &[T] {
        &self.params
    }

    /// Mutable access to the flat parameter vector. Invalidates the cached
    /// first-layer tables until [`MlpEstimator::refresh_tables`] is called.
    pub fn params_mut(&mut self) -> &mut [T] {
        self.tables_fresh = false;
        &mut self.params
    }

    fn compute_tables(&self, out: &mut [T]) {
        let h = self.hidden;
        for (m, &c) in self.in_cards.iter().enumerate() {
            for v in 0..c {
                let dst = &mut out[self.table_off[m] + v * h..self.table_off[m] + (v + 1) * h];
                dst.fill(T::zero());
                let emb = &self.params[self.emb_off[m] + v * EMBED_DIM..self.emb_off[m] + (v + 1) * EMBED_DIM];
                for (e, &x) in emb.iter().enumerate() {
                    let col = self.w1_off + (m * EMBED_DIM + e) * h;
                    for (d, &w) in dst.iter_mut().zip(&self.params[col..col + h]) {
                        *d += w * x;
                    }
                }
            }
        }
    }

    /// Recomputes the cached per-category first-layer contributions.
    pub fn refresh_tables(&mut self) {
        let mut t = std::mem::take(&mut self.tables);
        self.compute_tables(&mut t);
        self.tables = t;
        self.tables_fresh = true;
    }

    fn with_tables<R>(&self, f: impl FnOnce(&[T]) -> R) -> R {
        if self.tables_fresh {
            f(&self.tables)
        } else {
            let mut t = vec![T::zero(); self.tables.len()];
            self.compute_tables(&mut t);
            f(&t)
        }
    }

    /// Forward pass for one row given first-layer tables and visible inputs.
    /// Returns `log p(target_value)` and leaves `exp(logit − max)` in
    /// `logits`, together with their sum; `pre` and `act` are scratch.
    #[inline]
    fn row_logprob(
        &self,
        tables: &[T],
        row: &[u16],
        visible: &[usize],
        pre: &mut [T],
        act: &mut [T],
        logits: &mut [T],
    ) -> (T, T) {
        let h = self.hidden;
        pre.copy_from_slice(&self.params[self.b1_off..self.b1_off + h]);
        for &m in visible {
            let v = usize::from(row[self.inputs[m]]);
            let t = &tables[self.table_off[m] + v * h..self.table_off[m] + (v + 1) * h];
            for (p, &x) in pre.iter_mut().zip(t) {
                *p += x;
            }
        }
        for (a, &p) in act.iter_mut().zip(pre.iter()) {
            *a = leaky(p);
        }
        let mut mx = T::neg_infinity();
        for (c, l) in logits.iter_mut().enumerate() {
            let w = &self.params[self.w2_off + c * h..self.w2_off + (c + 1) * h];
            *l = dot(w, act) + self.params[self.b2_off + c];
            mx = mx.max(*l);
        }
        let y = logits[usize::from(row[self.target])];
        let mut z = T::zero();
        for l in logits.iter_mut() {
            *l = (*l - mx).exp();
            z += *l;
        }
        (y - mx - z.ln(), z)
    }

    /// `log p(x_target | visible inputs)` for every row; `visible[m]` refers
    /// to estimator input `m`.
    pub fn log_probs_inputs(&self, rows: &Samples, mask: &InputMask, out: &mut [f64]) {
        let visible: Vec<usize> = (0..self.inputs.len()).filter(|&m| mask.0[m]).collect();
        let (mut pre, mut act, mut logits) = (
            vec![T::zero(); self.hidden],
            vec![T::zero(); self.hidden],
            vec![T::zero(); self.card],
        );
        self.with_tables(|tables| {
            for (o, row) in out.iter_mut().zip(rows.iter()) {
                *o = self
                    .row_logprob(tables, row, &visible, &mut pre, &mut act, &mut logits)
                    .0
                    .to_f64();
            }
        });
    }

    fn check_row(&self, x: &[u16], mask_len: usize) -> Result<()> {
        if x.len() != self.n || mask_len != self.inputs.len() {
            return Err(Error::param("row or mask length does not match the estimator"));
        }
        let bad = self
            .inputs
            .iter()
            .zip(&self.in_cards)
            .any(|(&m, &c)| usize::from(x[m]) >= c)
            || usize::from(x[self.target]) >= self.card;
        if bad {
            return Err(Error::param("category out of range"));
        }
        Ok(())
    }

    /// Log-probability of `target_value` given the visible entries of `x`.
    ///
    /// ```
    /// use causalfit::model::{InputMask, MlpEstimator};
    /// let mut r = causalfit::rng::stream(0, 0);
    /// let mut est = MlpEstimator::<f64>::new(&[2, 3, 4], 2, &mut r).unwrap();
    /// est.params_mut().fill(0.0);
    /// let lp = est.forward_logprob(&[1, 2, 0], 3, &InputMask(vec![true, false])).unwrap();
    /// assert!((lp + 4f64.ln()).abs() < 1e-12);
    /// ```
    pub fn forward_logprob(&self, x: &[u16], target_value: usize, mask: &InputMask) -> Result<f64> {
        self.check_row(x, mask.0.len())?;
        if target_value >= self.card {
            return Err(Error::param("target value out of range"));
        }
        let mut row = x.to_vec();
        row[self.target] = target_value as u16;
        let rows = Samples::from_rows(self.n, row)?;
        let mut out = [0.0];
        self.log_probs_inputs(&rows, mask, &mut out);
        Ok(out[0])
    }

    /// Same as [`MlpEstimator::forward_logprob`] but every input is fed
    /// through its embedding, with masked inputs replaced by a zero vector.
    pub fn forward_logprob_zeroed(&self, x: &[u16], target_value: usize, mask: &InputMask) -> Result<f64> {
        self.check_row(x, mask.0.len())?;
        if target_value >= self.card {
            return Err(Error::param("target value out of range"));
        }
        let h = self.hidden;
        let zero = [T::zero(); EMBED_DIM];
        let mut pre: Vec<T> = self.params[self.b1_off..self.b1_off + h].to_vec();
        for m in 0..self.inputs.len() {
            let v = usize::from(x[self.inputs[m]]);
            let emb = if mask.0[m] {
                &self.params[self.emb_off[m] + v * EMBED_DIM..self.emb_off[m] + (v + 1) * EMBED_DIM]
            } else {
                &zero[..]
            };
            let mut t = vec![T::zero(); h];
            for (e, &xe) in emb.iter().enumerate() {
                let col = self.w1_off + (m * EMBED_DIM + e) * h;
                for (d, &w) in t.iter_mut().zip(&self.params[col..col + h]) {
                    *d += w * xe;
                }
            }
            for (p, &ti) in pre.iter_mut().zip(&t) {
                *p += ti;
            }
        }
        let act: Vec<T> = pre.iter().map(|&p| leaky(p)).collect();
        let logits: Vec<T> = (0..self.card)
            .map(|c| dot(&self.params[self.w2_off + c * h..self.w2_off + (c + 1) * h], &act) + self.params[self.b2_off + c])
            .collect();
        let mx = logits.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
        let z: T = logits.iter().map(|&l| (l - mx).exp()).sum();
        Ok((logits[target_value] - mx - z.ln()).to_f64())
    }

    /// Mean negative log-likelihood of a batch under per-row masks
    /// (`masks[r * inputs + m]`) and its gradient with respect to all
    /// parameters, written into `grad`.
    pub fn nll_and_grad(&self, batch: &Samples, masks: &[bool], grad: &mut [T]) -> Result<f64> {
        let b = batch.rows();
        let ni = self.inputs.len();
        if b == 0 {
            return Err(Error::param("empty batch"));
        }
        if masks.len() != b * ni || grad.len() != self.params.len() || batch.cols() != self.n {
            return Err(Error::param("batch, mask or gradient shape mismatch"));
        }
        let h = self.hidden;
        grad.fill(T::zero());
        let mut g_tab = vec![T::zero(); self.tables.len()];
        let (mut pre, mut act, mut logits) = (vec![T::zero(); h], vec![T::zero(); h], vec![T::zero(); self.card]);
        let mut dact = vec![T::zero(); h];
        let inv_b = T::of(1.0 / b as f64);
        let slope = T::of(LEAKY_SLOPE);
        let mut visible = Vec::with_capacity(ni);
        let mut nll = 0.0;

        self.with_tables(|tables| {
            for (r, row) in batch.iter().enumerate() {
                visible.clear();
                visible.extend((0..ni).filter(|&m| masks[r * ni + m]));
                let (lp, z) = self.row_logprob(tables, row, &visible, &mut pre, &mut act, &mut logits);
                nll -= lp.to_f64();
                let y = usize::from(row[self.target]);
                dact.fill(T::zero());
                for c in 0..self.card {
                    let mut d = logits[c] / z;
                    if c == y {
                        d -= T::one();
                    }
                    d = d * inv_b;
                    grad[self.b2_off + c] += d;
                    let w2 = self.w2_off + c * h;
                    let gw = &mut grad[w2..w2 + h];
                    let pw = &self.params[w2..w2 + h];
                    for ((g, &a), (da, &w)) in gw.iter_mut().zip(act.iter()).zip(dact.iter_mut().zip(pw)) {
                        *g += d * a;
                        *da += d * w;
                    }
                }
                let gb = &mut grad[self.b1_off..self.b1_off + h];
                for ((da, &p), g) in dact.iter_mut().zip(pre.iter()).zip(gb) {
                    if p <= T::zero() {
                        *da = *da * slope;
                    }
                    *g += *da;
                }
                for &m in &visible {
                    let v = usize::from(row[self.inputs[m]]);
                    let g = &mut g_tab[self.table_off[m] + v * h..self.table_off[m] + (v + 1) * h];
                    for (gi, &di) in g.iter_mut().zip(&dact) {
                        *gi += di;
                    }
                }
            }
        });

        // push the per-category table gradients back to W1 and embeddings
        for (m, &c) in self.in_cards.iter().enumerate() {
            for v in 0..c {
                let g = &g_tab[self.table_off[m] + v * h..self.table_off[m] + (v + 1) * h];
                if g.iter().all(|&x| x == T::zero()) {
                    continue;
                }
                for e in 0..EMBED_DIM {
                    let col = self.w1_off + (m * EMBED_DIM + e) * h;
                    let ei = self.emb_off[m] + v * EMBED_DIM + e;
                    let x = self.params[ei];
                    for (gw, &gk) in grad[col..col + h].iter_mut().zip(g) {
                        *gw += x * gk;
                    }
                    grad[ei] += dot(&self.params[col..col + h], g);
                }
            }
        }
        Ok(nll / b as f64)
    }

    /// One optimizer step on `batch` with one mask per row drawn from the
    /// current edge probabilities `p(X_m → X_target)`. Returns the mean NLL
    /// before the update.
    pub fn train_step(&mut self, batch: &Samples, edges: &EdgeParams, opt: &mut AdamState, rng: &mut Rng) -> Result<f64> {
        if batch.rows() == 0 {
            return Err(Error::param("empty batch"));
        }
        let probs: Vec<f64> = self.inputs.iter().map(|&m| edges.edge_prob(m, self.target)).collect();
        let mut masks = Vec::with_capacity(batch.rows() * probs.len());
        for _ in 0..batch.rows() {
            masks.extend(probs.iter().map(|&p| rng.random::<f64>() < p));
        }
        self.train_step_masked(batch, &masks, opt)
    }

    /// One optimizer step with explicit per-row masks.
    pub fn train_step_masked(&mut self, batch: &Samples, masks: &[bool], opt: &mut AdamState) -> Result<f64> {
        let mut grad = vec![T::zero(); self.params.len()];
        let nll = self.nll_and_grad(batch, masks, &mut grad)?;
        opt.update(&mut self.params, &grad)?;
        self.refresh_tables();
        Ok(nll)
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }
}

// ---- checkpoints ----

const CHECKPOINT_MAGIC: &[u8; 4] = b"CFML";
const CHECKPOINT_VERSION: u32 = 1;

impl MlpEstimator<f32> {
    /// Versioned binary checkpoint: magic, version, shapes, then all
    /// parameters as little-endian f32 with matrices in row-major order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 4 * self.params.len());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        let mut put = |x: u32| out.extend_from_slice(&x.to_le_bytes());
        put(CHECKPOINT_VERSION);
        put(self.n as u32);
        put(self.target as u32);
        put(self.card as u32);
        put(self.hidden as u32);
        put(EMBED_DIM as u32);
        for &c in &self.in_cards {
            put(c as u32);
        }
        let mut floats = |xs: &[f32]| {
            for x in xs {
                out.extend_from_slice(&x.to_le_bytes());
            }
        };
        floats(&self.params[..self.w1_off]);
        let in_dim = EMBED_DIM * self.inputs.len();
        let h = self.hidden;
        let row_major: Vec<f32> = (0..h)
            .flat_map(|k| (0..in_dim).map(move |d| (k, d)))
            .map(|(k, d)| self.params[self.w1_off + d * h + k])
            .collect();
        floats(&row_major);
        floats(&self.params[self.b1_off..]);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::param(format!("invalid checkpoint: {m}"));
        let body = bytes.strip_prefix(CHECKPOINT_MAGIC.as_slice()).ok_or_else(|| bad("magic"))?;
        let mut words = body.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]);
        let mut next = || words.next().ok_or_else(|| bad("truncated"));
        let version = u32::from_le_bytes(next()?);
        if version != CHECKPOINT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let n = u32::from_le_bytes(next()?) as usize;
        let target = u32::from_le_bytes(next()?) as usize;
        let card = u32::from_le_bytes(next()?) as usize;
        let hidden = u32::from_le_bytes(next()?) as usize;
        if u32::from_le_bytes(next()?) as usize != EMBED_DIM || target >= n {
            return Err(bad("shape header"));
        }
        let mut cards = vec![0; n];
        cards[target] = card;
        for (m, c) in cards.iter_mut().enumerate() {
            if m != target {
                *c = u32::from_le_bytes(next()?) as usize;
            }
        }
        let mut est = MlpEstimator::<f32>::with_hidden(&cards, target, hidden, &mut crate::rng::stream(0, 0))?;
        let mut vals = Vec::with_capacity(est.params.len());
        for _ in 0..est.params.len() {
            vals.push(f32::from_le_bytes(next()?));
        }
        if next().is_ok() {
            return Err(bad("trailing bytes"));
        }
        let in_dim = EMBED_DIM * est.inputs.len();
        let w1 = est.w1_off;
        est.params[..w1].copy_from_slice(&vals[..w1]);
        for k in 0..hidden {
            for d in 0..in_dim {
                est.params[w1 + d * hidden + k] = vals[w1 + k * in_dim + d];
            }
        }
        est.params[est.b1_off..].copy_from_slice(&vals[est.b1_off..]);
        est.refresh_tables();
        Ok(est)
    }
}

// ---- exact tables ----

/// Exact conditionals `p(X_target | X_S)` derived from a model's joint,
/// computed lazily per conditioning set and cached.
#[derive(Debug)]
pub struct TableEstimator {
    target: usize,
    joint: Arc<JointTable>,
    cache: Mutex<HashMap<Vec<usize>, Arc<Vec<f64>>>>,
}

impl Clone for TableEstimator {
    fn clone(&self) -> Self {
        TableEstimator {
            target: self.target,
            joint: Arc::clone(&self.joint),
            cache: Mutex::new(self.cache.lock().expect("cache lock").clone()),
        }
    }
}

/// Table estimators for every variable of `cgm`, sharing one observational joint.
pub fn table_estimators(cgm: &Cgm) -> Result<Vec<TableEstimator>> {
    let joint = Arc::new(exact_joint(cgm)?);
    Ok((0..cgm.n())
        .map(|t| TableEstimator::from_joint(Arc::clone(&joint), t))
        .collect())
}

/// The exact estimator for a single variable.
pub fn table_estimator_from_cgm(cgm: &Cgm, target: usize) -> Result<TableEstimator> {
    if target >= cgm.n() {
        return Err(Error::param(format!("target {target} out of range")));
    }
    Ok(TableEstimator::from_joint(Arc::new(exact_joint(cgm)?), target))
}

/// `p(target | given)` from a joint: rows indexed by the mixed-radix tuple
/// of `given` (first most significant), `card(target)` entries each.
/// Zero-mass rows become uniform.
pub fn conditional_table(joint: &JointTable, target: usize, given: &[usize]) -> Vec<f64> {
    let mut keep = given.to_vec();
    keep.push(target);
    let mut m = joint.marginalize(&keep).probs;
    let c = joint.cards[target];
    for row in m.chunks_mut(c) {
        let s: f64 = row.iter().sum();
        if s > 0.0 {
            row.iter_mut().for_each(|p| *p /= s);
        } else {
            row.fill(1.0 / c as f64);
        }
    }
    m
}

impl TableEstimator {
    pub fn from_joint(joint: Arc<JointTable>, target: usize) -> Self {
        TableEstimator {
            target,
            joint,
            cache: Mutex::new(HashMap::new()),
        }
    }

    pub fn target(&self) -> usize {
        self.target
    }

    /// The conditional table given the sorted conditioning set `given`.
    pub fn conditional(&self, given: &[usize]) -> Arc<Vec<f64>> {
        let mut cache = self.cache.lock().expect("cache lock");
        Arc::clone(
            cache
                .entry(given.to_vec())
                .or_insert_with(|| Arc::new(conditional_table(&self.joint, self.target, given))),
        )
    }

    /// `p(X_target = value | X_given = vals)`.
    pub fn prob(&self, given: &[usize], vals: &[usize], value: usize) -> f64 {
        let t = self.conditional(given);
        let r = given
            .iter()
            .zip(vals)
            .fold(0, |acc, (&g, &v)| acc * self.joint.cards[g] + v);
        t[r * self.joint.cards[self.target] + value]
    }

    /// `log p(x_target | x_S)` for every row, with `S` the variables whose
    /// `parent_mask` entry is set (the target's own entry is ignored).
    pub fn log_probs(&self, rows: &Samples, parent_mask: &[bool], out: &mut [f64]) {
        let given: Vec<usize> = (0..parent_mask.len())
            .filter(|&m| m != self.target && parent_mask[m])
            .collect();
        let t = self.conditional(&given);
        let cards = &self.joint.cards;
        let c = cards[self.target];
        for (o, row) in out.iter_mut().zip(rows.iter()) {
            let r = given.iter().fold(0, |acc, &g| acc * cards[g] + usize::from(row[g]));
            *o = t[r * c + usize::from(row[self.target])].ln();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use crate::scm::reference_chain;

    #[test]
    fn zero_network_is_uniform() {
        let mut r = rng::stream(1, 0);
        let mut est = MlpEstimator::<f32>::new(&[3, 5, 2], 1, &mut r).unwrap();
        est.params_mut().fill(0.0);
        for mask in [vec![true, true], vec![false, true], vec![false, false]] {
            let lp = est.forward_logprob(&[2, 0, 1], 4, &InputMask(mask)).unwrap();
            assert!((lp + 5f64.ln()).abs() < 1e-6);
        }
    }

    #[test]
    fn masking_equals_zero_embedding_bitwise() {
        let mut r = rng::stream(2, 0);
        let est = MlpEstimator::<f32>::new(&[3, 4, 2, 5], 2, &mut r).unwrap();
        for bits in 0..8u32 {
            let mask = InputMask((0..3).map(|k| bits >> k & 1 == 1).collect());
            for x in [[0u16, 3, 1, 4], [2, 1, 0, 0]] {
                for y in 0..2 {
                    let a = est.forward_logprob(&x, y, &mask).unwrap();
                    let b = est.forward_logprob_zeroed(&x, y, &mask).unwrap();
                    assert_eq!(a.to_bits(), b.to_bits());
                }
            }
        }
    }

    #[test]
    fn forward_rejects_out_of_range() {
        let mut r = rng::stream(2, 0);
        let est = MlpEstimator::<f32>::new(&[3, 2], 1, &mut r).unwrap();
        assert!(est.forward_logprob(&[3, 0], 0, &InputMask(vec![true])).is_err());
        assert!(est.forward_logprob(&[0, 0], 2, &InputMask(vec![true])).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut r = rng::stream(3, 0);
        let cards = [3, 2, 4];
        let mut est = MlpEstimator::<f64>::with_hidden(&cards, 0, 8, &mut r).unwrap();
        let rows: Vec<u16> = (0..6).flat_map(|k| [k % 3, k % 2, (k * 3) % 4]).collect();
        let batch = Samples::from_rows(3, rows).unwrap();
        let masks: Vec<bool> = (0..12).map(|k| k % 3 != 0).collect();
        let mut grad = vec![0.0; est.num_params()];
        est.nll_and_grad(&batch, &masks, &mut grad).unwrap();
        let h = 1e-5;
        for k in 0..est.num_params() {
            let orig = est.params()[k];
            est.params_mut()[k] = orig + h;
            let mut scratch = vec![0.0; grad.len()];
            let up = est.nll_and_grad(&batch, &masks, &mut scratch).unwrap();
            est.params_mut()[k] = orig - h;
            let down = est.nll_and_grad(&batch, &masks, &mut scratch).unwrap();
            est.params_mut()[k] = orig;
            let fd = (up - down) / (2.0 * h);
            let err = (fd - grad[k]).abs() / (fd.abs().max(grad[k].abs()).max(1e-6));
            assert!(err < 1e-4 || (fd - grad[k]).abs() < 1e-9, "param {k}: fd {fd} analytic {}", grad[k]);
        }
    }

    #[test]
    fn adam_first_step_and_moments() {
        let mut opt = AdamState::new(1, 0.01, (0.9, 0.999), 1e-12, 0.0);
        let mut p = [1.0f64];
        opt.update(&mut p, &[0.5]).unwrap();
        assert!((p[0] - 0.99).abs() < 1e-9);
        assert!((opt.m[0] - 0.05).abs() < 1e-15);
        assert!((opt.v[0] - 0.001 * 0.25).abs() < 1e-15);
        assert_eq!(opt.steps, vec![1]);
        let mut q = [2.0f64];
        let mut opt = AdamState::new(1, 0.01, (0.9, 0.999), 1e-8, 0.0);
        opt.update(&mut q, &[0.0]).unwrap();
        assert_eq!(q[0], 2.0);
        assert!(opt.update(&mut q, &[0.0, 1.0]).is_err());
    }

    #[test]
    fn masked_update_leaves_others() {
        let mut opt = AdamState::new(3, 0.1, (0.9, 0.9), 1e-8, 0.0);
        let mut p = [0.0, 0.0, 0.0];
        opt.update_masked(&mut p, &[1.0, 1.0, 1.0], &[true, false, true]).unwrap();
        assert_eq!(p[1], 0.0);
        assert_eq!(opt.steps, vec![1, 0, 1]);
    }

    #[test]
    fn learns_bernoulli_marginal() {
        let mut r = rng::stream(4, 0);
        let cards = [2, 2];
        let mut est = MlpEstimator::<f32>::new(&cards, 0, &mut r).unwrap();
        let mut opt = AdamState::for_network(est.num_params());
        let data: Vec<u16> = (0..1000).flat_map(|k| [u16::from(k % 10 < 7), 0]).collect();
        let data = Samples::from_rows(2, data).unwrap();
        let mut edges = EdgeParams::zeros(2);
        edges.set_gamma(1, 0, -1e3);
        for _ in 0..1000 {
            let idx: Vec<usize> = (0..128).map(|_| r.random_range(0..1000)).collect();
            est.train_step(&data.select(&idx), &edges, &mut opt, &mut r).unwrap();
        }
        let p1 = est.forward_logprob(&[0, 0], 1, &InputMask(vec![false])).unwrap().exp();
        assert!((0.65..=0.75).contains(&p1), "{p1}");
    }

    #[test]
    fn checkpoint_round_trip() {
        let mut r = rng::stream(5, 0);
        let est = MlpEstimator::<f32>::new(&[3, 2, 4], 1, &mut r).unwrap();
        let bytes = est.to_bytes();
        let back = MlpEstimator::<f32>::from_bytes(&bytes).unwrap();
        assert_eq!(back, est);
        assert_eq!(back.to_bytes(), bytes);
        assert!(MlpEstimator::<f32>::from_bytes(&bytes[..bytes.len() - 1]).is_err());
    }

    #[test]
    fn chain_tables() {
        let cgm = reference_chain();
        let t = table_estimator_from_cgm(&cgm, 1).unwrap();
        assert!((t.prob(&[0], &[1], 1) - 0.6).abs() < 1e-12);
        assert!((t.prob(&[], &[], 1) - 0.54).abs() < 1e-12);
        for given in [vec![], vec![0], vec![2], vec![0, 2]] {
            for row in t.conditional(&given).chunks(2) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }
}
