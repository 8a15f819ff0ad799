//! Directed graphs over categorical variables, edge parameters, synthetic
//! structure generators and structure-recovery metrics.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::{self, sigmoid};

/// A categorical variable: its label and number of categories.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct VarMeta {
    pub name: String,
    pub cardinality: usize,
    /// Optional outcome labels, one per category, in index order.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub outcomes: Vec<String>,
}

impl VarMeta {
    pub fn new(name: impl Into<String>, cardinality: usize) -> Self {
        VarMeta {
            name: name.into(),
            cardinality,
            outcomes: Vec::new(),
        }
    }
}

pub(crate) fn validate_vars(vars: &[VarMeta]) -> Result<()> {
    for (i, v) in vars.iter().enumerate() {
        if v.cardinality < 2 {
            return Err(Error::param(format!(
                "variable {} has cardinality {} (need at least 2)",
                v.name, v.cardinality
            )));
        }
        if !v.outcomes.is_empty() && v.outcomes.len() != v.cardinality {
            return Err(Error::param(format!(
                "variable {} lists {} outcomes for cardinality {}",
                v.name,
                v.outcomes.len(),
                v.cardinality
            )));
        }
        if vars[..i].iter().any(|w| w.name == v.name) {
            return Err(Error::param(format!("duplicate variable name {}", v.name)));
        }
    }
    Ok(())
}

/// Variables plus a directed adjacency matrix; `has_edge(i, j)` means `X_i → X_j`.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CausalGraph {
    vars: Vec<VarMeta>,
    adj: Vec<bool>,
}

impl CausalGraph {
    /// An edgeless graph over `vars`.
    pub fn new(vars: Vec<VarMeta>) -> Result<Self> {
        validate_vars(&vars)?;
        let n = vars.len();
        Ok(CausalGraph {
            vars,
            adj: vec![false; n * n],
        })
    }

    /// An edgeless graph over `n` variables named `X0..` with the given cardinality.
    pub fn empty(n: usize, cardinality: usize) -> Result<Self> {
        Self::new(
            (0..n)
                .map(|i| VarMeta::new(format!("X{i}"), cardinality))
                .collect(),
        )
    }

    pub fn from_edges(vars: Vec<VarMeta>, edges: &[(usize, usize)]) -> Result<Self> {
        let mut g = Self::new(vars)?;
        for &(i, j) in edges {
            g.add_edge(i, j)?;
        }
        Ok(g)
    }

    pub fn n(&self) -> usize {
        self.vars.len()
    }

    pub fn vars(&self) -> &[VarMeta] {
        &self.vars
    }

    pub fn var_index(&self, name: &str) -> Option<usize> {
        self.vars.iter().position(|v| v.name == name)
    }

    /// Sets every variable's cardinality to `card`, dropping outcome labels.
    pub fn set_cardinality(&mut self, card: usize) -> Result<()> {
        if card < 2 {
            return Err(Error::param("cardinality must be at least 2"));
        }
        for v in &mut self.vars {
            v.cardinality = card;
            v.outcomes.clear();
        }
        Ok(())
    }

    #[inline]
    pub fn has_edge(&self, i: usize, j: usize) -> bool {
        self.adj[i * self.n() + j]
    }

    pub fn add_edge(&mut self, i: usize, j: usize) -> Result<()> {
        let n = self.n();
        if i >= n || j >= n {
            return Err(Error::param(format!("edge ({i}, {j}) out of range for {n} nodes")));
        }
        if i == j {
            return Err(Error::param(format!("self-loop on node {i}")));
        }
        self.adj[i * n + j] = true;
        Ok(())
    }

    pub fn remove_edge(&mut self, i: usize, j: usize) {
        let n = self.n();
        self.adj[i * n + j] = false;
    }

    /// All edges in row-major order.
    pub fn edges(&self) -> Vec<(usize, usize)> {
        let n = self.n();
        (0..n)
            .flat_map(|i| (0..n).map(move |j| (i, j)))
            .filter(|&(i, j)| self.has_edge(i, j))
            .collect()
    }

    pub fn edge_count(&self) -> usize {
        self.adj.iter().filter(|&&e| e).count()
    }

    /// Parents of `j` in increasing index order.
    pub fn parents(&self, j: usize) -> Vec<usize> {
        (0..self.n()).filter(|&i| self.has_edge(i, j)).collect()
    }

    pub fn children(&self, i: usize) -> Vec<usize> {
        (0..self.n()).filter(|&j| self.has_edge(i, j)).collect()
    }

    /// A topological order (Kahn's algorithm, smallest ready index first), or
    /// `None` if the graph has a cycle.
    pub fn topological_order(&self) -> Option<Vec<usize>> {
        let n = self.n();
        let mut indeg: Vec<usize> = (0..n).map(|j| self.parents(j).len()).collect();
        let mut ready: std::collections::BTreeSet<usize> =
            (0..n).filter(|&j| indeg[j] == 0).collect();
        let mut order = Vec::with_capacity(n);
        while let Some(i) = ready.pop_first() {
            order.push(i);
            for j in self.children(i) {
                indeg[j] -= 1;
                if indeg[j] == 0 {
                    ready.insert(j);
                }
            }
        }
        (order.len() == n).then_some(order)
    }

    /// Nodes reachable from `i` along directed edges, excluding `i` itself
    /// unless it lies on a cycle.
    pub fn descendants(&self, i: usize) -> Vec<bool> {
        let n = self.n();
        let mut seen = vec![false; n];
        let mut stack = self.children(i);
        while let Some(v) = stack.pop() {
            if !seen[v] {
                seen[v] = true;
                stack.extend(self.children(v));
            }
        }
        seen
    }

    pub fn is_ancestor(&self, a: usize, b: usize) -> bool {
        self.descendants(a)[b]
    }
}

/// True iff `g` has no directed cycle.
pub fn is_acyclic(g: &CausalGraph) -> bool {
    g.topological_order().is_some()
}

/// Synthetic structure families.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GraphKind {
    Bidiag,
    Chain,
    Collider,
    Full,
    Jungle,
    Random,
}

impl GraphKind {
    pub const ALL: [GraphKind; 6] = [
        GraphKind::Bidiag,
        GraphKind::Chain,
        GraphKind::Collider,
        GraphKind::Full,
        GraphKind::Jungle,
        GraphKind::Random,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            GraphKind::Bidiag => "bidiag",
            GraphKind::Chain => "chain",
            GraphKind::Collider => "collider",
            GraphKind::Full => "full",
            GraphKind::Jungle => "jungle",
            GraphKind::Random => "random",
        }
    }
}

impl fmt::Display for GraphKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GraphKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        GraphKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::param(format!("unknown graph kind '{s}'")))
    }
}

/// Generates a DAG of the given family over `n` binary variables `X0..`.
///
/// All edges point from lower to higher index. `edge_prob` is only used by
/// [`GraphKind::Random`], and `seed` only matters there too.
///
/// ```
/// use causalfit::graph::{gen_graph, GraphKind};
/// let g = gen_graph(GraphKind::Collider, 4, 0.0, 0).unwrap();
/// assert_eq!(g.edges(), vec![(0, 3), (1, 3), (2, 3)]);
/// ```
pub fn gen_graph(kind: GraphKind, n: usize, edge_prob: f64, seed: u64) -> Result<CausalGraph> {
    if n < 2 {
        return Err(Error::param(format!("need at least 2 nodes, got {n}")));
    }
    let mut g = CausalGraph::empty(n, 2)?;
    match kind {
        GraphKind::Chain => {
            for i in 0..n - 1 {
                g.add_edge(i, i + 1)?;
            }
        }
        GraphKind::Bidiag => {
            for i in 0..n - 1 {
                g.add_edge(i, i + 1)?;
                if i + 2 < n {
                    g.add_edge(i, i + 2)?;
                }
            }
        }
        GraphKind::Collider => {
            for i in 0..n - 1 {
                g.add_edge(i, n - 1)?;
            }
        }
        GraphKind::Full => {
            for i in 0..n {
                for j in i + 1..n {
                    g.add_edge(i, j)?;
                }
            }
        }
        GraphKind::Jungle => {
            if n < 3 {
                return Err(Error::param("jungle needs at least 3 nodes"));
            }
            for c in 1..n {
                let p = (c - 1) / 2;
                g.add_edge(p, c)?;
                if p > 0 {
                    g.add_edge((p - 1) / 2, c)?;
                }
            }
        }
        GraphKind::Random => {
            if !(edge_prob > 0.0 && edge_prob < 1.0) {
                return Err(Error::param(format!(
                    "edge_prob must lie in (0, 1), got {edge_prob}"
                )));
            }
            let mut r = rng::stream(seed, 0x6772_6170);
            for i in 0..n {
                for j in i + 1..n {
                    if r.random::<f64>() < edge_prob {
                        g.add_edge(i, j)?;
                    }
                }
            }
        }
    }
    Ok(g)
}

fn check_same_size(a: &CausalGraph, b: &CausalGraph) -> Result<()> {
    if a.n() != b.n() {
        return Err(Error::param(format!(
            "graphs have different node counts ({} vs {})",
            a.n(),
            b.n()
        )));
    }
    Ok(())
}

/// Structural Hamming distance.
///
/// Each unordered pair is compared as a whole, so a reversed edge costs 1
/// rather than a removal plus an addition.
pub fn shd(pred: &CausalGraph, truth: &CausalGraph) -> Result<usize> {
    check_same_size(pred, truth)?;
    let n = pred.n();
    let mut d = 0;
    for i in 0..n {
        for j in i + 1..n {
            let a = (pred.has_edge(i, j), pred.has_edge(j, i));
            let b = (truth.has_edge(i, j), truth.has_edge(j, i));
            d += usize::from(a != b);
        }
    }
    Ok(d)
}

/// Directed-edge precision and recall. An empty prediction has precision 1,
/// an empty truth has recall 1.
pub fn edge_precision_recall(pred: &CausalGraph, truth: &CausalGraph) -> Result<(f64, f64)> {
    check_same_size(pred, truth)?;
    let hits = pred
        .adj
        .iter()
        .zip(&truth.adj)
        .filter(|(&p, &t)| p && t)
        .count() as f64;
    let np = pred.edge_count();
    let nt = truth.edge_count();
    let precision = if np == 0 { 1.0 } else { hits / np as f64 };
    let recall = if nt == 0 { 1.0 } else { hits / nt as f64 };
    Ok((precision, recall))
}

/// Learned edge logits: `gamma` for existence, `theta` for orientation.
///
/// `theta` is antisymmetric; every write goes through [`EdgeParams::set_theta`],
/// which updates the mirrored entry too. Diagonals stay at zero.
#[derive(Clone, Debug, PartialEq)]
pub struct EdgeParams {
    n: usize,
    gamma: Vec<f64>,
    theta: Vec<f64>,
}

impl EdgeParams {
    pub fn zeros(n: usize) -> Self {
        EdgeParams {
            n,
            gamma: vec![0.0; n * n],
            theta: vec![0.0; n * n],
        }
    }

    /// Builds parameters from row-major matrices. `theta` must be exactly
    /// antisymmetric.
    pub fn from_matrices(n: usize, gamma: Vec<f64>, theta: Vec<f64>) -> Result<Self> {
        if gamma.len() != n * n || theta.len() != n * n {
            return Err(Error::param("matrix size does not match node count"));
        }
        let mut p = EdgeParams::zeros(n);
        for i in 0..n {
            for j in 0..n {
                if i == j {
                    continue;
                }
                if theta[i * n + j] != -theta[j * n + i] {
                    return Err(Error::param(format!("theta is not antisymmetric at ({i}, {j})")));
                }
                p.gamma[i * n + j] = gamma[i * n + j];
                p.theta[i * n + j] = theta[i * n + j];
            }
        }
        Ok(p)
    }

    /// Zero γ with θ pointing along a topological order of `g`:
    /// `θ_ij = magnitude` whenever `i` comes before `j`. The state of a fit
    /// whose orientations have settled but whose edge logits have not.
    pub fn oriented(g: &CausalGraph, magnitude: f64) -> Result<Self> {
        let order = g
            .topological_order()
            .ok_or_else(|| Error::param("graph has a cycle"))?;
        let mut p = EdgeParams::zeros(g.n());
        for (a, &i) in order.iter().enumerate() {
            for &j in &order[a + 1..] {
                p.set_theta(i, j, magnitude);
            }
        }
        Ok(p)
    }

    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn gamma(&self, i: usize, j: usize) -> f64 {
        self.gamma[i * self.n + j]
    }

    #[inline]
    pub fn theta(&self, i: usize, j: usize) -> f64 {
        self.theta[i * self.n + j]
    }

    /// Row-major γ.
    pub fn gamma_matrix(&self) -> &[f64] {
        &self.gamma
    }

    /// Row-major θ.
    pub fn theta_matrix(&self) -> &[f64] {
        &self.theta
    }

    pub fn set_gamma(&mut self, i: usize, j: usize, v: f64) {
        if i != j {
            self.gamma[i * self.n + j] = v;
        }
    }

    /// Sets `θ_ij = v` and `θ_ji = -v`.
    pub fn set_theta(&mut self, i: usize, j: usize, v: f64) {
        if i != j {
            self.theta[i * self.n + j] = v;
            self.theta[j * self.n + i] = -v;
        }
    }

    /// `σ(γ_ij)·σ(θ_ij)`; zero on the diagonal.
    #[inline]
    pub fn edge_prob(&self, i: usize, j: usize) -> f64 {
        if i == j {
            0.0
        } else {
            sigmoid(self.gamma(i, j)) * sigmoid(self.theta(i, j))
        }
    }

    pub fn is_antisymmetric(&self) -> bool {
        let n = self.n;
        (0..n).all(|i| {
            self.theta[i * n + i] == 0.0 && (0..n).all(|j| self.theta(i, j) == -self.theta(j, i))
        })
    }
}

#[derive(Serialize, Deserialize)]
struct EdgeParamsRepr {
    gamma: Vec<Vec<f64>>,
    theta: Vec<Vec<f64>>,
}

impl Serialize for EdgeParams {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        let rows = |m: &[f64]| m.chunks(self.n.max(1)).map(<[f64]>::to_vec).collect();
        EdgeParamsRepr {
            gamma: if self.n == 0 { vec![] } else { rows(&self.gamma) },
            theta: if self.n == 0 { vec![] } else { rows(&self.theta) },
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for EdgeParams {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = EdgeParamsRepr::deserialize(d)?;
        let n = r.gamma.len();
        if r.theta.len() != n || r.gamma.iter().chain(&r.theta).any(|row| row.len() != n) {
            return Err(serde::de::Error::custom("gamma and theta must be square and equal-sized"));
        }
        EdgeParams::from_matrices(n, r.gamma.concat(), r.theta.concat())
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Serialize, Deserialize)]
struct GraphRepr {
    vars: Vec<VarMeta>,
    edges: Vec<(usize, usize)>,
}

impl Serialize for CausalGraph {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        GraphRepr {
            vars: self.vars.clone(),
            edges: self.edges(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for CausalGraph {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = GraphRepr::deserialize(d)?;
        CausalGraph::from_edges(r.vars, &r.edges).map_err(serde::de::Error::custom)
    }
}

/// A permutation of node indices; earlier nodes may point to later ones.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OrderPermutation(pub Vec<usize>);

impl OrderPermutation {
    /// `pos[v]` is the position of node `v`.
    pub fn positions(&self) -> Vec<usize> {
        let mut pos = vec![0; self.0.len()];
        for (k, &v) in self.0.iter().enumerate() {
            pos[v] = k;
        }
        pos
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OrderMode {
    /// Exact search over all permutations (at most 10 nodes).
    Exhaustive,
    /// Single-node insertion moves from a row-sum start plus a fixed number
    /// of seeded random starts; the best local optimum wins.
    Greedy,
}

/// Largest node count accepted by [`OrderMode::Exhaustive`].
pub const EXHAUSTIVE_MAX_NODES: usize = 10;

#[inline]
fn log_sigmoid(x: f64) -> f64 {
    // ln σ(x) = -ln(1 + e^{-x}), stable for both signs
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// `Σ_{a<b} ln σ(θ[O_a][O_b])`, the log of the order's orientation likelihood.
pub fn order_score(params: &EdgeParams, order: &[usize]) -> f64 {
    let mut s = 0.0;
    for (a, &u) in order.iter().enumerate() {
        for &v in &order[a + 1..] {
            s += log_sigmoid(params.theta(u, v));
        }
    }
    s
}

fn exhaustive_order(params: &EdgeParams) -> Vec<usize> {
    // Depth-first enumeration in lexicographic order with prefix scores.
    // Only a strictly better complete order replaces the incumbent, so the
    // lexicographically first maximizer wins ties.
    struct Search<'a> {
        params: &'a EdgeParams,
        used: Vec<bool>,
        cur: Vec<usize>,
        best: Vec<usize>,
        best_score: f64,
    }
    impl Search<'_> {
        fn go(&mut self, score: f64) {
            let n = self.used.len();
            if self.cur.len() == n {
                if score > self.best_score {
                    self.best_score = score;
                    self.best.clone_from(&self.cur);
                }
                return;
            }
            for v in 0..n {
                if self.used[v] {
                    continue;
                }
                let add: f64 = self.cur.iter().map(|&u| log_sigmoid(self.params.theta(u, v))).sum();
                self.used[v] = true;
                self.cur.push(v);
                self.go(score + add);
                self.cur.pop();
                self.used[v] = false;
            }
        }
    }
    let n = params.n();
    let mut s = Search {
        params,
        used: vec![false; n],
        cur: Vec::with_capacity(n),
        best: (0..n).collect(),
        best_score: f64::NEG_INFINITY,
    };
    s.go(0.0);
    s.best
}

/// Random restarts added to the row-sum start in greedy order search.
pub const GREEDY_RESTARTS: usize = 24;

fn insertion_search(params: &EdgeParams, mut order: Vec<usize>) -> Vec<usize> {
    // Moving v past w flips one pair; since ln σ(-x) - ln σ(x) = -x, the gain
    // of that flip is θ[w][v] when v moves later and θ[v][w] when it moves
    // earlier. Gains along a sweep accumulate in O(1) per position.
    const MIN_GAIN: f64 = 1e-12;
    let n = order.len();
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for p in 0..n {
            let v = order[p];
            let mut gain = 0.0;
            for q in p + 1..n {
                gain += params.theta(order[q], v);
                if gain > MIN_GAIN && best.is_none_or(|b| gain > b.0) {
                    best = Some((gain, p, q));
                }
            }
            let mut gain = 0.0;
            for q in (0..p).rev() {
                gain += params.theta(v, order[q]);
                if gain > MIN_GAIN && best.is_none_or(|b| gain > b.0) {
                    best = Some((gain, p, q));
                }
            }
        }
        match best {
            Some((_, p, q)) => {
                let v = order.remove(p);
                order.insert(q, v);
            }
            None => return order,
        }
    }
}

pub(crate) fn greedy_order(params: &EdgeParams, restarts: usize) -> Vec<usize> {
    use rand::seq::SliceRandom;

    let n = params.n();
    let row_sum = |i: usize| -> f64 { (0..n).filter(|&j| j != i).map(|j| sigmoid(params.theta(i, j))).sum() };
    let sums: Vec<f64> = (0..n).map(row_sum).collect();
    let mut start: Vec<usize> = (0..n).collect();
    start.sort_by(|&a, &b| sums[b].total_cmp(&sums[a]).then(a.cmp(&b)));

    let mut best = insertion_search(params, start.clone());
    let mut best_score = order_score(params, &best);
    let mut r = rng::stream(n as u64, 0x6f72_6465);
    for _ in 0..restarts {
        start.shuffle(&mut r);
        let cand = insertion_search(params, start.clone());
        let score = order_score(params, &cand);
        if score > best_score + 1e-12 || ((score - best_score).abs() <= 1e-12 && cand < best) {
            best = cand;
            best_score = score;
        }
    }
    best
}

/// Finds a variable order maximizing the orientation likelihood, then keeps
/// only predicted edges that agree with it. The result is always acyclic.
///
/// ```
/// use causalfit::graph::{enforce_acyclic_order, CausalGraph, EdgeParams, OrderMode};
/// let mut p = EdgeParams::zeros(3);
/// for (i, j) in [(0, 1), (1, 2), (2, 0)] {
///     p.set_gamma(i, j, 5.0);
///     p.set_theta(i, j, 2.0);
/// }
/// let vars = CausalGraph::empty(3, 2).unwrap().vars().to_vec();
/// let (order, g) = enforce_acyclic_order(&p, &vars, OrderMode::Exhaustive).unwrap();
/// assert_eq!(order.0.len(), 3);
/// assert_eq!(g.edge_count(), 2);
/// ```
pub fn enforce_acyclic_order(
    params: &EdgeParams,
    vars: &[VarMeta],
    mode: OrderMode,
) -> Result<(OrderPermutation, CausalGraph)> {
    let n = params.n();
    if vars.len() != n {
        return Err(Error::param("variable list does not match parameter size"));
    }
    let order = match mode {
        OrderMode::Exhaustive => {
            if n > EXHAUSTIVE_MAX_NODES {
                return Err(Error::param(format!(
                    "exhaustive order search supports at most {EXHAUSTIVE_MAX_NODES} nodes, got {n}"
                )));
            }
            exhaustive_order(params)
        }
        OrderMode::Greedy => greedy_order(params, GREEDY_RESTARTS),
    };
    let order = OrderPermutation(order);
    let pos = order.positions();
    let mut g = predict_graph(params, vars)?;
    for (i, j) in g.edges() {
        if pos[i] > pos[j] {
            g.remove_edge(i, j);
        }
    }
    Ok((order, g))
}

/// Thresholds the parameters: edge `i → j` iff `σ(γ_ij) > 0.5` and `σ(θ_ij) > 0.5`.
pub fn predict_graph(params: &EdgeParams, vars: &[VarMeta]) -> Result<CausalGraph> {
    let n = params.n();
    if vars.len() != n {
        return Err(Error::param("variable list does not match parameter size"));
    }
    let mut g = CausalGraph::new(vars.to_vec())?;
    for i in 0..n {
        for j in 0..n {
            if i != j && sigmoid(params.gamma(i, j)) > 0.5 && sigmoid(params.theta(i, j)) > 0.5 {
                g.add_edge(i, j)?;
            }
        }
    }
    Ok(g)
}

// ---- text format ----

fn valid_name(s: &str) -> bool {
    !s.is_empty() && !s.contains("->") && s.chars().all(|c| !c.is_whitespace() && c != ':' && c != ',')
}

impl CausalGraph {
    /// Serializes as a `nodes:` header plus one `edge:` line per edge.
    ///
    /// ```
    /// use causalfit::graph::{gen_graph, CausalGraph, GraphKind};
    /// let g = gen_graph(GraphKind::Chain, 3, 0.0, 0).unwrap();
    /// let text = g.to_text();
    /// assert_eq!(text, "nodes: X0:2,X1:2,X2:2\nedge: X0 -> X1\nedge: X1 -> X2\n");
    /// assert_eq!(CausalGraph::from_text(&text).unwrap(), g);
    /// ```
    pub fn to_text(&self) -> String {
        let mut s = String::from("nodes: ");
        let nodes: Vec<String> = self
            .vars
            .iter()
            .map(|v| format!("{}:{}", v.name, v.cardinality))
            .collect();
        s.push_str(&nodes.join(","));
        s.push('\n');
        for (i, j) in self.edges() {
            s.push_str(&format!("edge: {} -> {}\n", self.vars[i].name, self.vars[j].name));
        }
        s
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let err = |line: usize, col: usize, msg: String| Error::Parse { line, col, msg };
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (hl, header) = lines
            .next()
            .ok_or_else(|| err(1, 1, "empty graph file".into()))?;
        let body = header
            .strip_prefix("nodes:")
            .ok_or_else(|| err(hl + 1, 1, "expected 'nodes:' header".into()))?;
        let mut vars = Vec::new();
        let mut col = "nodes:".len() + 1;
        for item in body.split(',') {
            let t = item.trim();
            let (name, card) = t
                .rsplit_once(':')
                .ok_or_else(|| err(hl + 1, col, format!("expected name:cardinality, got '{t}'")))?;
            if !valid_name(name) {
                return Err(err(hl + 1, col, format!("invalid node name '{name}'")));
            }
            let card: usize = card
                .parse()
                .map_err(|_| err(hl + 1, col, format!("invalid cardinality '{card}'")))?;
            vars.push(VarMeta::new(name, card));
            col += item.len() + 1;
        }
        let mut g = CausalGraph::new(vars).map_err(|e| err(hl + 1, 1, e.to_string()))?;
        for (ln, line) in lines {
            let rest = line
                .strip_prefix("edge:")
                .ok_or_else(|| err(ln + 1, 1, "expected 'edge:' line".into()))?;
            let (a, b) = rest
                .split_once("->")
                .ok_or_else(|| err(ln + 1, 6, "expected 'src -> dst'".into()))?;
            let (a, b) = (a.trim(), b.trim());
            let i = g
                .var_index(a)
                .ok_or_else(|| err(ln + 1, 6, format!("unknown node '{a}'")))?;
            let j = g
                .var_index(b)
                .ok_or_else(|| err(ln + 1, line.find("->").unwrap_or(0) + 3, format!("unknown node '{b}'")))?;
            g.add_edge(i, j).map_err(|e| err(ln + 1, 1, e.to_string()))?;
        }
        Ok(g)
    }
}
