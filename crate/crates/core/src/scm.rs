//! Ground-truth causal graphical models over categorical variables:
//! mechanisms, ancestral sampling, interventions and exact joints.

use std::collections::BTreeMap;

use rand::Rng as _;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::{CausalGraph, VarMeta};
use crate::rng::{self, Rng};

/// Largest joint state space handled by exact computations.
pub const MAX_JOINT_STATES: usize = 10_000_000;

const NEURAL_HIDDEN: usize = 48;
const NEURAL_EMBED: usize = 4;
const NEURAL_GAIN: f64 = 2.5;
const LEAKY_SLOPE: f64 = 0.1;

/// A generator network: per-parent category embeddings, one hidden layer
/// with leaky rectifier, softmax output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NeuralMech {
    /// `embed[k]` holds `card(parent_k) × 4` values, row-major by category.
    pub embed: Vec<Vec<f64>>,
    /// `hidden × (4·parents)`, row-major.
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    /// `card × hidden`, row-major.
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

impl NeuralMech {
    fn hidden(&self) -> usize {
        self.b1.len()
    }

    fn probs(&self, parent_vals: &[usize], out: &mut [f64]) {
        let h_dim = self.hidden();
        let in_dim = NEURAL_EMBED * parent_vals.len();
        let mut input = Vec::with_capacity(in_dim);
        for (k, &v) in parent_vals.iter().enumerate() {
            input.extend_from_slice(&self.embed[k][v * NEURAL_EMBED..(v + 1) * NEURAL_EMBED]);
        }
        let mut h = self.b1.clone();
        for (r, hr) in h.iter_mut().enumerate() {
            let row = &self.w1[r * in_dim..(r + 1) * in_dim];
            *hr += row.iter().zip(&input).map(|(w, x)| w * x).sum::<f64>();
            if *hr < 0.0 {
                *hr *= LEAKY_SLOPE;
            }
        }
        for (c, o) in out.iter_mut().enumerate() {
            let row = &self.w2[c * h_dim..(c + 1) * h_dim];
            *o = self.b2[c] + row.iter().zip(&h).map(|(w, x)| w * x).sum::<f64>();
        }
        softmax_in_place(out);
    }
}

pub(crate) fn softmax_in_place(v: &mut [f64]) {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for x in v.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in v.iter_mut() {
        *x /= s;
    }
}

/// Conditional distribution of one variable given its parents.
///
/// Parent tuples index tables in mixed radix with the first parent most
/// significant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Cpd {
    Table {
        parents: Vec<usize>,
        card: usize,
        /// One row of `card` probabilities per parent tuple.
        probs: Vec<f64>,
    },
    Neural {
        parents: Vec<usize>,
        card: usize,
        mech: NeuralMech,
    },
    Deterministic {
        parents: Vec<usize>,
        card: usize,
        /// Output category per parent tuple.
        lookup: Vec<usize>,
    },
}

impl Cpd {
    pub fn parents(&self) -> &[usize] {
        match self {
            Cpd::Table { parents, .. } | Cpd::Neural { parents, .. } | Cpd::Deterministic { parents, .. } => {
                parents
            }
        }
    }

    pub fn card(&self) -> usize {
        match self {
            Cpd::Table { card, .. } | Cpd::Neural { card, .. } | Cpd::Deterministic { card, .. } => *card,
        }
    }

    /// Writes `p(· | parents)` into `out`, reading parent values from the full row `x`.
    pub fn probs<V: Copy + Into<usize>>(&self, x: &[V], cards: &[usize], out: &mut [f64]) {
        match self {
            Cpd::Table { parents, card, probs } => {
                let r = tuple_index(parents, x, cards);
                out.copy_from_slice(&probs[r * card..(r + 1) * card]);
            }
            Cpd::Deterministic { parents, lookup, .. } => {
                out.fill(0.0);
                out[lookup[tuple_index(parents, x, cards)]] = 1.0;
            }
            Cpd::Neural { parents, mech, .. } => {
                let vals: Vec<usize> = parents.iter().map(|&p| x[p].into()).collect();
                mech.probs(&vals, out);
            }
        }
    }

    /// The full conditional table, one row per parent tuple.
    pub fn to_table(&self, cards: &[usize]) -> Vec<f64> {
        let parents = self.parents();
        let card = self.card();
        let rows: usize = parents.iter().map(|&p| cards[p]).product();
        let mut out = vec![0.0; rows * card];
        let mut vals = vec![0usize; cards.len()];
        for r in 0..rows {
            let mut rem = r;
            for &p in parents.iter().rev() {
                vals[p] = rem % cards[p];
                rem /= cards[p];
            }
            self.probs(&vals, cards, &mut out[r * card..(r + 1) * card]);
        }
        out
    }
}

fn tuple_index<V: Copy + Into<usize>>(parents: &[usize], x: &[V], cards: &[usize]) -> usize {
    parents.iter().fold(0, |acc, &p| acc * cards[p] + x[p].into())
}

/// A DAG with one mechanism per variable.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Cgm {
    pub graph: CausalGraph,
    pub cpds: Vec<Cpd>,
}

impl Cgm {
    /// Checks acyclicity, parent sets against the graph and row normalization.
    pub fn new(graph: CausalGraph, cpds: Vec<Cpd>) -> Result<Self> {
        let cgm = Cgm { graph, cpds };
        cgm.validate()?;
        Ok(cgm)
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.graph;
        if !crate::graph::is_acyclic(g) {
            return Err(Error::param("graph has a cycle"));
        }
        if self.cpds.len() != g.n() {
            return Err(Error::param("need exactly one mechanism per variable"));
        }
        let cards = self.cards();
        for (j, cpd) in self.cpds.iter().enumerate() {
            let name = &g.vars()[j].name;
            if cpd.parents() != g.parents(j).as_slice() {
                return Err(Error::param(format!("mechanism parents of {name} do not match the graph")));
            }
            if cpd.card() != cards[j] {
                return Err(Error::param(format!("mechanism cardinality of {name} does not match")));
            }
            let rows: usize = cpd.parents().iter().map(|&p| cards[p]).product();
            match cpd {
                Cpd::Table { probs, card, .. } => {
                    if probs.len() != rows * card {
                        return Err(Error::param(format!("table of {name} has the wrong size")));
                    }
                    for row in probs.chunks(*card) {
                        let s: f64 = row.iter().sum();
                        if row.iter().any(|&p| !(p >= 0.0)) || (s - 1.0).abs() > 1e-9 {
                            return Err(Error::param(format!("table row of {name} is not a distribution")));
                        }
                    }
                }
                Cpd::Deterministic { lookup, card, .. } => {
                    if lookup.len() != rows || lookup.iter().any(|&v| v >= *card) {
                        return Err(Error::param(format!("lookup of {name} is malformed")));
                    }
                }
                Cpd::Neural { mech, card, parents } => {
                    let h = mech.hidden();
                    let ok = mech.embed.len() == parents.len()
                        && mech
                            .embed
                            .iter()
                            .zip(parents)
                            .all(|(e, &p)| e.len() == cards[p] * NEURAL_EMBED)
                        && mech.w1.len() == h * NEURAL_EMBED * parents.len()
                        && mech.w2.len() == card * h
                        && mech.b2.len() == *card;
                    if !ok {
                        return Err(Error::param(format!("network of {name} has inconsistent shapes")));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn n(&self) -> usize {
        self.graph.n()
    }

    pub fn cards(&self) -> Vec<usize> {
        self.graph.vars().iter().map(|v| v.cardinality).collect()
    }
}

// ---- generators ----

fn orthogonal(rows: usize, cols: usize, gain: f64, r: &mut Rng) -> Vec<f64> {
    // Gram-Schmidt on the shorter side of a Gaussian matrix; the result has
    // orthonormal rows (rows <= cols) or orthonormal columns (rows > cols).
    if rows == 0 || cols == 0 {
        return vec![0.0; rows * cols];
    }
    let (k, len) = if rows <= cols { (rows, cols) } else { (cols, rows) };
    let mut vecs: Vec<Vec<f64>> = Vec::with_capacity(k);
    while vecs.len() < k {
        let mut v: Vec<f64> = (0..len).map(|_| StandardNormal.sample(r)).collect();
        for u in &vecs {
            let d: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (a, b) in v.iter_mut().zip(u) {
                *a -= d * b;
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            vecs.push(v);
        }
    }
    let mut m = vec![0.0; rows * cols];
    for (a, v) in vecs.iter().enumerate() {
        for (b, &x) in v.iter().enumerate() {
            let (i, j) = if rows <= cols { (a, b) } else { (b, a) };
            m[i * cols + j] = gain * x;
        }
    }
    m
}

fn graph_with_card(g: &CausalGraph, card: usize) -> Result<CausalGraph> {
    let mut g = g.clone();
    g.set_cardinality(card)?;
    Ok(g)
}

/// Random generator networks (orthogonal weights with gain 2.5, biases
/// uniform on [-0.5, 0.5], Gaussian embeddings) for every variable.
pub fn make_neural_cgm(g: &CausalGraph, cardinality: usize, seed: u64) -> Result<Cgm> {
    let g = graph_with_card(g, cardinality)?;
    let mut r = rng::stream(seed, 0x6e65_7572);
    let cpds = (0..g.n())
        .map(|j| {
            let parents = g.parents(j);
            let embed = parents
                .iter()
                .map(|_| {
                    (0..cardinality * NEURAL_EMBED)
                        .map(|_| StandardNormal.sample(&mut r))
                        .collect()
                })
                .collect();
            let in_dim = NEURAL_EMBED * parents.len();
            let w1 = orthogonal(NEURAL_HIDDEN, in_dim, NEURAL_GAIN, &mut r);
            let b1 = (0..NEURAL_HIDDEN).map(|_| r.random_range(-0.5..0.5)).collect();
            let w2 = orthogonal(cardinality, NEURAL_HIDDEN, NEURAL_GAIN, &mut r);
            let b2 = (0..cardinality).map(|_| r.random_range(-0.5..0.5)).collect();
            Cpd::Neural {
                parents,
                card: cardinality,
                mech: NeuralMech { embed, w1, b1, w2, b2 },
            }
        })
        .collect();
    Cgm::new(g, cpds)
}

fn softmax_row(r: &mut Rng, card: usize, std: f64) -> Vec<f64> {
    let normal = Normal::new(0.0, std).expect("positive std");
    let mut v: Vec<f64> = (0..card).map(|_| normal.sample(r)).collect();
    softmax_in_place(&mut v);
    v
}

fn table_rows(cards: &[usize], parents: &[usize], card: usize) -> Result<usize> {
    let mut rows = 1usize;
    for &p in parents {
        rows = rows
            .checked_mul(cards[p])
            .filter(|&x| x.saturating_mul(card) <= MAX_JOINT_STATES)
            .ok_or_else(|| Error::Capacity("conditional table exceeds 10^7 entries".into()))?;
    }
    Ok(rows)
}

/// Pairwise factors of a product CGM: `factors[j][k][v]` is the
/// distribution over `X_j` given that its `k`-th parent takes value `v`.
/// Roots get a single factor with a single row.
pub fn product_factors(g: &CausalGraph, cardinality: usize, seed: u64) -> Vec<Vec<Vec<Vec<f64>>>> {
    let mut r = rng::stream(seed, 0x7072_6f64);
    (0..g.n())
        .map(|j| {
            let np = g.parents(j).len();
            if np == 0 {
                vec![vec![softmax_row(&mut r, cardinality, 2.0)]]
            } else {
                (0..np)
                    .map(|_| (0..cardinality).map(|_| softmax_row(&mut r, cardinality, 2.0)).collect())
                    .collect()
            }
        })
        .collect()
}

/// Conditionals built as normalized products of independent pairwise factors
/// `p(X_j | X_p)`, each a softmax of N(0, 2²) logits per parent value.
pub fn make_product_cgm(g: &CausalGraph, cardinality: usize, seed: u64) -> Result<Cgm> {
    let g = graph_with_card(g, cardinality)?;
    let cards = vec![cardinality; g.n()];
    for j in 0..g.n() {
        table_rows(&cards, &g.parents(j), cardinality)?;
    }
    let factors = product_factors(&g, cardinality, seed);
    let mut cpds = Vec::with_capacity(g.n());
    for (j, fj) in factors.iter().enumerate() {
        let parents = g.parents(j);
        let rows: usize = parents.iter().map(|&p| cards[p]).product();
        let mut probs = Vec::with_capacity(rows * cardinality);
        for row in 0..rows {
            let mut out = vec![1.0; cardinality];
            let mut rem = row;
            for k in (0..fj.len()).rev() {
                let v = if parents.is_empty() { 0 } else { rem % cardinality };
                rem /= cardinality;
                for (o, f) in out.iter_mut().zip(&fj[k][v]) {
                    *o *= f;
                }
            }
            let s: f64 = out.iter().sum();
            probs.extend(out.iter().map(|p| p / s));
        }
        cpds.push(Cpd::Table {
            parents,
            card: cardinality,
            probs,
        });
    }
    Cgm::new(g, cpds)
}

/// Deterministic lookups for non-root variables and random marginals for
/// roots. With `leaf_noise`, variables without children get random
/// stochastic tables instead of lookups.
pub fn make_deterministic_cgm(g: &CausalGraph, cardinality: usize, seed: u64, leaf_noise: bool) -> Result<Cgm> {
    let g = graph_with_card(g, cardinality)?;
    let cards = vec![cardinality; g.n()];
    let mut r = rng::stream(seed, 0x6465_7465);
    let mut cpds = Vec::with_capacity(g.n());
    for j in 0..g.n() {
        let parents = g.parents(j);
        let rows = table_rows(&cards, &parents, cardinality)?;
        let stochastic = parents.is_empty() || (leaf_noise && g.children(j).is_empty());
        cpds.push(if stochastic {
            Cpd::Table {
                parents,
                card: cardinality,
                probs: (0..rows).flat_map(|_| softmax_row(&mut r, cardinality, 2.0)).collect(),
            }
        } else {
            Cpd::Deterministic {
                parents,
                card: cardinality,
                lookup: (0..rows).map(|_| r.random_range(0..cardinality)).collect(),
            }
        });
    }
    Cgm::new(g, cpds)
}

/// Which observed pairs may share a latent confounder.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PairFilter {
    /// No direct edge between the two.
    Unconnected,
    /// Neither is an ancestor of the other and they share no ancestor, so
    /// they are independent in the base graph.
    Independent,
}

/// Appends `k` latent root nodes `L0..`, each pointing to a distinct pair of
/// observed nodes chosen uniformly among the admissible pairs.
///
/// Returns the augmented graph and the latent indices (`n..n+k`).
pub fn add_latent_confounders(
    g: &CausalGraph,
    k: usize,
    seed: u64,
    filter: PairFilter,
) -> Result<(CausalGraph, Vec<usize>)> {
    let n = g.n();
    let desc: Vec<Vec<bool>> = (0..n).map(|i| g.descendants(i)).collect();
    let mut pairs = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let ok = match filter {
                PairFilter::Unconnected => !g.has_edge(i, j) && !g.has_edge(j, i),
                PairFilter::Independent => {
                    !desc[i][j] && !desc[j][i] && !(0..n).any(|a| desc[a][i] && desc[a][j])
                }
            };
            if ok {
                pairs.push((i, j));
            }
        }
    }
    if pairs.len() < k {
        return Err(Error::param(format!(
            "only {} admissible pairs for {k} confounders",
            pairs.len()
        )));
    }
    let mut r = rng::stream(seed, 0x6c61_7465);
    let chosen = rand::seq::index::sample(&mut r, pairs.len(), k);
    let mut vars = g.vars().to_vec();
    let card = vars.first().map_or(2, |v| v.cardinality);
    for l in 0..k {
        let mut name = format!("L{l}");
        while vars.iter().any(|v| v.name == name) {
            name.push('_');
        }
        vars.push(VarMeta::new(name, card));
    }
    let mut aug = CausalGraph::from_edges(vars, &g.edges())?;
    for (l, idx) in chosen.iter().enumerate() {
        let (i, j) = pairs[idx];
        aug.add_edge(n + l, i)?;
        aug.add_edge(n + l, j)?;
    }
    Ok((aug, (n..n + k).collect()))
}

// ---- sampling ----

/// Row-major matrix of category indices.
#[derive(Clone, Debug, PartialEq, Eq, Default)]
pub struct Samples {
    cols: usize,
    data: Vec<u16>,
}

impl Samples {
    pub fn new(cols: usize) -> Self {
        Samples { cols, data: Vec::new() }
    }

    pub fn from_rows(cols: usize, data: Vec<u16>) -> Result<Self> {
        if cols == 0 || data.len() % cols != 0 {
            return Err(Error::param("sample buffer is not a whole number of rows"));
        }
        Ok(Samples { cols, data })
    }

    pub fn rows(&self) -> usize {
        if self.cols == 0 {
            0
        } else {
            self.data.len() / self.cols
        }
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, r: usize) -> &[u16] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn iter(&self) -> impl Iterator<Item = &[u16]> {
        self.data.chunks(self.cols.max(1))
    }

    pub fn push_row(&mut self, row: &[u16]) {
        assert_eq!(row.len(), self.cols);
        self.data.extend_from_slice(row);
    }

    pub fn as_slice(&self) -> &[u16] {
        &self.data
    }

    /// Rows at the given indices, in that order.
    pub fn select(&self, idx: &[usize]) -> Samples {
        let mut out = Samples::new(self.cols);
        out.data.reserve(idx.len() * self.cols);
        for &i in idx {
            out.data.extend_from_slice(self.row(i));
        }
        out
    }
}

fn sample_categorical(p: &[f64], r: &mut Rng) -> usize {
    let u: f64 = r.random();
    let mut acc = 0.0;
    for (k, &pk) in p.iter().enumerate() {
        acc += pk;
        if u < acc {
            return k;
        }
    }
    // rounding left a sliver above the cumulative sum
    p.iter().rposition(|&x| x > 0.0).unwrap_or(p.len() - 1)
}

fn ancestral(cgm: &Cgm, target: Option<usize>, count: usize, r: &mut Rng, drop_vars: &[usize]) -> Samples {
    let n = cgm.n();
    let cards = cgm.cards();
    let order = cgm.graph.topological_order().expect("validated acyclic");
    let keep: Vec<usize> = (0..n).filter(|v| !drop_vars.contains(v)).collect();
    let mut out = Samples::new(keep.len());
    out.data.reserve(count * keep.len());
    let mut x = vec![0u16; n];
    let mut p = vec![0.0; cards.iter().copied().max().unwrap_or(0)];
    for _ in 0..count {
        for &j in &order {
            let pj = &mut p[..cards[j]];
            if Some(j) == target {
                pj.fill(1.0 / cards[j] as f64);
            } else {
                cgm.cpds[j].probs(&x, &cards, pj);
            }
            x[j] = sample_categorical(pj, r) as u16;
        }
        out.data.extend(keep.iter().map(|&v| x[v]));
    }
    out
}

/// Ancestral sampling from the observational distribution; columns listed
/// in `drop_vars` are removed from the result.
pub fn sample_obs(cgm: &Cgm, count: usize, seed: u64, drop_vars: &[usize]) -> Samples {
    let mut r = rng::stream(seed, 1);
    ancestral(cgm, None, count, &mut r, drop_vars)
}

/// Ancestral sampling with `target`'s mechanism replaced by a uniform distribution.
pub fn sample_int(cgm: &Cgm, target: usize, count: usize, seed: u64, drop_vars: &[usize]) -> Result<Samples> {
    if target >= cgm.n() || drop_vars.contains(&target) {
        return Err(Error::param(format!("invalid intervention target {target}")));
    }
    let mut r = rng::stream(seed, 0x100 + target as u64);
    Ok(ancestral(cgm, Some(target), count, &mut r, drop_vars))
}

/// How an interventional block was generated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Intervention {
    /// The target's mechanism replaced by the uniform distribution.
    Uniform,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct InterventionBlock {
    pub samples: Samples,
    pub kind: Intervention,
}

/// Observational samples plus one interventional block per intervened target.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Dataset {
    pub meta: Vec<VarMeta>,
    pub obs: Samples,
    pub ints: BTreeMap<usize, InterventionBlock>,
    /// Seed the data was generated with, if known.
    pub seed: Option<u64>,
}

impl Dataset {
    pub fn n(&self) -> usize {
        self.meta.len()
    }

    pub fn cards(&self) -> Vec<usize> {
        self.meta.iter().map(|v| v.cardinality).collect()
    }

    pub fn intervened_targets(&self) -> Vec<usize> {
        self.ints.keys().copied().collect()
    }

    /// Checks shapes and category ranges.
    pub fn validate(&self) -> Result<()> {
        crate::graph::validate_vars(&self.meta)?;
        let cards = self.cards();
        let check = |s: &Samples, what: &str| -> Result<()> {
            if s.rows() > 0 && s.cols() != cards.len() {
                return Err(Error::param(format!("{what} has {} columns, expected {}", s.cols(), cards.len())));
            }
            for row in s.iter() {
                if let Some((i, &v)) = row.iter().enumerate().find(|(i, &v)| usize::from(v) >= cards[*i]) {
                    return Err(Error::param(format!(
                        "{what}: value {v} out of range for variable {}",
                        self.meta[i].name
                    )));
                }
            }
            Ok(())
        };
        check(&self.obs, "observational block")?;
        for (&t, b) in &self.ints {
            if t >= cards.len() {
                return Err(Error::param(format!("intervention target {t} out of range")));
            }
            check(&b.samples, &format!("interventional block {}", self.meta[t].name))?;
        }
        Ok(())
    }
}

/// Samples a full dataset: `obs_count` observational rows and `int_count`
/// rows for each target in `targets` (indices into the observed variables).
pub fn generate_dataset(
    cgm: &Cgm,
    obs_count: usize,
    int_count: usize,
    targets: &[usize],
    seed: u64,
    drop_vars: &[usize],
) -> Result<Dataset> {
    let keep: Vec<usize> = (0..cgm.n()).filter(|v| !drop_vars.contains(v)).collect();
    let meta: Vec<VarMeta> = keep.iter().map(|&v| cgm.graph.vars()[v].clone()).collect();
    let obs = sample_obs(cgm, obs_count, seed, drop_vars);
    let mut ints = BTreeMap::new();
    for &t in targets {
        let full = *keep
            .get(t)
            .ok_or_else(|| Error::param(format!("invalid intervention target {t}")))?;
        ints.insert(
            t,
            InterventionBlock {
                samples: sample_int(cgm, full, int_count, seed, drop_vars)?,
                kind: Intervention::Uniform,
            },
        );
    }
    Ok(Dataset {
        meta,
        obs,
        ints,
        seed: Some(seed),
    })
}

// ---- exact joints ----

/// A dense probability table over a product of categorical domains.
/// The last variable varies fastest.
#[derive(Clone, Debug, PartialEq)]
pub struct JointTable {
    pub cards: Vec<usize>,
    pub strides: Vec<usize>,
    pub probs: Vec<f64>,
}

fn strides_for(cards: &[usize]) -> Vec<usize> {
    let mut s = vec![1; cards.len()];
    for k in (0..cards.len().saturating_sub(1)).rev() {
        s[k] = s[k + 1] * cards[k + 1];
    }
    s
}

pub(crate) fn checked_states(cards: &[usize]) -> Result<usize> {
    cards
        .iter()
        .try_fold(1usize, |acc, &c| acc.checked_mul(c).filter(|&x| x <= MAX_JOINT_STATES))
        .ok_or_else(|| Error::Capacity("joint state space exceeds 10^7 states".into()))
}

impl JointTable {
    pub fn index(&self, state: &[usize]) -> usize {
        state.iter().zip(&self.strides).map(|(v, s)| v * s).sum()
    }

    pub fn prob(&self, state: &[usize]) -> f64 {
        self.probs[self.index(state)]
    }

    pub fn total(&self) -> f64 {
        self.probs.iter().sum()
    }

    /// Marginal over `keep`, with variables in the order given.
    pub fn marginalize(&self, keep: &[usize]) -> JointTable {
        let cards: Vec<usize> = keep.iter().map(|&k| self.cards[k]).collect();
        let strides = strides_for(&cards);
        let mut probs = vec![0.0; cards.iter().product()];
        // stride of each kept variable inside the output, indexed by input position
        let mut out_stride = vec![0; self.cards.len()];
        for (pos, &k) in keep.iter().enumerate() {
            out_stride[k] = strides[pos];
        }
        let mut digits = vec![0usize; self.cards.len()];
        let mut o = 0usize;
        for &p in &self.probs {
            probs[o] += p;
            for k in (0..digits.len()).rev() {
                digits[k] += 1;
                o += out_stride[k];
                if digits[k] < self.cards[k] {
                    break;
                }
                o -= out_stride[k] * digits[k];
                digits[k] = 0;
            }
        }
        JointTable { cards, strides, probs }
    }
}

fn joint_with(cgm: &Cgm, target: Option<usize>) -> Result<JointTable> {
    let cards = cgm.cards();
    let size = checked_states(&cards)?;
    let tables: Vec<Vec<f64>> = (0..cgm.n())
        .map(|j| {
            if Some(j) == target {
                let rows: usize = cgm.cpds[j].parents().iter().map(|&p| cards[p]).product();
                vec![1.0 / cards[j] as f64; rows * cards[j]]
            } else {
                cgm.cpds[j].to_table(&cards)
            }
        })
        .collect();
    let strides = strides_for(&cards);
    let mut probs = Vec::with_capacity(size);
    let mut x = vec![0usize; cards.len()];
    for _ in 0..size {
        let mut p = 1.0;
        for (j, cpd) in cgm.cpds.iter().enumerate() {
            let r = tuple_index(cpd.parents(), &x, &cards);
            p *= tables[j][r * cards[j] + x[j]];
        }
        probs.push(p);
        for k in (0..x.len()).rev() {
            x[k] += 1;
            if x[k] < cards[k] {
                break;
            }
            x[k] = 0;
        }
    }
    Ok(JointTable { cards, strides, probs })
}

/// The observational joint by full enumeration.
pub fn exact_joint(cgm: &Cgm) -> Result<JointTable> {
    joint_with(cgm, None)
}

/// The joint with `target`'s mechanism replaced by a uniform distribution.
pub fn exact_int_joint(cgm: &Cgm, target: usize) -> Result<JointTable> {
    if target >= cgm.n() {
        return Err(Error::param(format!("invalid intervention target {target}")));
    }
    joint_with(cgm, Some(target))
}

/// The three-variable binary chain used throughout the docs and tests:
/// `p(X1=1)=0.7`, `X2` copies `X1` with probability 0.6 and `X3` copies `X2`
/// with probability 0.2.
pub fn reference_chain() -> Cgm {
    let vars = ["X1", "X2", "X3"].map(|n| VarMeta::new(n, 2)).to_vec();
    let g = CausalGraph::from_edges(vars, &[(0, 1), (1, 2)]).expect("valid chain");
    let cpds = vec![
        Cpd::Table { parents: vec![], card: 2, probs: vec![0.3, 0.7] },
        Cpd::Table { parents: vec![0], card: 2, probs: vec![0.6, 0.4, 0.4, 0.6] },
        Cpd::Table { parents: vec![1], card: 2, probs: vec![0.2, 0.8, 0.8, 0.2] },
    ];
    Cgm::new(g, cpds).expect("valid chain mechanisms")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{gen_graph, GraphKind};

    fn mean_col(s: &Samples, c: usize) -> f64 {
        s.iter().map(|r| f64::from(r[c])).sum::<f64>() / s.rows() as f64
    }

    fn within_binomial(phat: f64, p: f64, n: usize) -> bool {
        (phat - p).abs() <= 3.0 * (p * (1.0 - p) / n as f64).sqrt()
    }

    #[test]
    fn chain_marginals() {
        let cgm = reference_chain();
        let s = sample_obs(&cgm, 100_000, 3, &[]);
        assert!(within_binomial(mean_col(&s, 0), 0.7, s.rows()));
        assert!(within_binomial(mean_col(&s, 2), 0.476, s.rows()));
        let s = sample_int(&cgm, 1, 100_000, 3, &[]).unwrap();
        assert!(within_binomial(mean_col(&s, 0), 0.7, s.rows()));
        assert!(within_binomial(mean_col(&s, 1), 0.5, s.rows()));
        assert!(within_binomial(mean_col(&s, 2), 0.5, s.rows()));
    }

    #[test]
    fn chain_joint_entries() {
        let cgm = reference_chain();
        let j = exact_joint(&cgm).unwrap();
        assert!((j.prob(&[1, 1, 0]) - 0.336).abs() < 1e-12);
        assert!((j.total() - 1.0).abs() < 1e-12);
        let m = j.marginalize(&[2]);
        assert!((m.probs[1] - 0.476).abs() < 1e-12);
        let ji = exact_int_joint(&cgm, 1).unwrap();
        let m = ji.marginalize(&[1]);
        assert!((m.probs[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn marginalize_reorders() {
        let cgm = reference_chain();
        let j = exact_joint(&cgm).unwrap();
        let m = j.marginalize(&[2, 0]);
        for a in 0..2 {
            for b in 0..2 {
                let direct: f64 = (0..2).map(|x2| j.prob(&[b, x2, a])).sum();
                assert!((m.prob(&[a, b]) - direct).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn neural_rows_normalized_and_deterministic() {
        let g = gen_graph(GraphKind::Bidiag, 4, 0.0, 0).unwrap();
        let a = make_neural_cgm(&g, 3, 7).unwrap();
        let b = make_neural_cgm(&g, 3, 7).unwrap();
        assert_eq!(a, b);
        let cards = a.cards();
        for cpd in &a.cpds {
            for row in cpd.to_table(&cards).chunks(3) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn orthogonal_shapes() {
        let mut r = rng::stream(1, 0);
        let m = orthogonal(3, 8, 1.0, &mut r);
        for a in 0..3 {
            for b in 0..3 {
                let d: f64 = (0..8).map(|k| m[a * 8 + k] * m[b * 8 + k]).sum();
                assert!((d - f64::from(u8::from(a == b))).abs() < 1e-10);
            }
        }
        let m = orthogonal(8, 3, 2.5, &mut r);
        for a in 0..3 {
            let d: f64 = (0..8).map(|k| m[k * 3 + a] * m[k * 3 + a]).sum();
            assert!((d - 6.25).abs() < 1e-10);
        }
    }

    #[test]
    fn product_tables_match_bruteforce() {
        let g = gen_graph(GraphKind::Collider, 3, 0.0, 0).unwrap();
        let cgm = make_product_cgm(&g, 3, 11).unwrap();
        let f = product_factors(&g, 3, 11);
        let Cpd::Table { probs, .. } = &cgm.cpds[1] else { panic!() };
        assert_eq!(probs.as_slice(), f[1][0][0].as_slice());
        let Cpd::Table { probs, .. } = &cgm.cpds[2] else { panic!() };
        for a in 0..3 {
            for b in 0..3 {
                let raw: Vec<f64> = (0..3).map(|k| f[2][0][a][k] * f[2][1][b][k]).collect();
                let z: f64 = raw.iter().sum();
                for k in 0..3 {
                    assert!((probs[(a * 3 + b) * 3 + k] - raw[k] / z).abs() < 1e-15);
                }
            }
        }
    }

    #[test]
    fn deterministic_samples_follow_lookup() {
        let g = gen_graph(GraphKind::Chain, 3, 0.0, 0).unwrap();
        let cgm = make_deterministic_cgm(&g, 4, 5, false).unwrap();
        let Cpd::Deterministic { lookup, .. } = &cgm.cpds[1] else { panic!() };
        for r in sample_obs(&cgm, 2000, 1, &[]).iter() {
            assert_eq!(usize::from(r[1]), lookup[usize::from(r[0])]);
        }
        let noisy = make_deterministic_cgm(&g, 4, 5, true).unwrap();
        assert!(matches!(noisy.cpds[2], Cpd::Table { .. }));
        assert!(matches!(noisy.cpds[1], Cpd::Deterministic { .. }));
    }

    #[test]
    fn latent_confounders_shape() {
        let g = gen_graph(GraphKind::Random, 10, 0.3, 2).unwrap();
        let (aug, lat) = add_latent_confounders(&g, 3, 9, PairFilter::Unconnected).unwrap();
        assert_eq!(lat, vec![10, 11, 12]);
        assert!(crate::graph::is_acyclic(&aug));
        let mut seen = Vec::new();
        for &l in &lat {
            assert!(aug.parents(l).is_empty());
            let ch = aug.children(l);
            assert_eq!(ch.len(), 2);
            assert!(!g.has_edge(ch[0], ch[1]) && !g.has_edge(ch[1], ch[0]));
            assert!(!seen.contains(&ch));
            seen.push(ch);
        }
        let full = gen_graph(GraphKind::Full, 4, 0.0, 0).unwrap();
        assert!(add_latent_confounders(&full, 1, 0, PairFilter::Unconnected).is_err());
    }

    #[test]
    fn capacity_error() {
        let g = CausalGraph::empty(8, 10).unwrap();
        let cgm = make_product_cgm(&g, 10, 0).unwrap();
        assert!(matches!(exact_joint(&cgm), Err(Error::Capacity(_))));
    }

    #[test]
    fn dropped_columns_removed() {
        let cgm = reference_chain();
        let s = sample_obs(&cgm, 10, 0, &[1]);
        assert_eq!(s.cols(), 2);
        assert!(sample_int(&cgm, 1, 10, 0, &[1]).is_err());
        assert!(sample_int(&cgm, 5, 10, 0, &[]).is_err());
    }
}
