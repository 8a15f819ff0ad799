//! Exact check of the convergence conditions on small models, by full
//! enumeration of the joint and of every candidate parent set.
//!
//! For a pair `X_i → X_j` and a conditioning set `S ⊆ X_{-i,j}` the basic
//! quantity is the expected log-likelihood gain of adding `X_i` to `S`,
//! `E_I[ln p(x_j | x_S, x_i) − ln p(x_j | x_S)]`, where `p` are the
//! observational conditionals and the expectation runs over the joint under
//! intervention `I`.
//!
//! 1. Under the intervention on `X_i` the gain is non-negative for every `S`.
//! 2. It is strictly positive for at least one `S`.
//! 3. For true edges, averaged uniformly over all interventions except the
//!    one on `X_j`, the gain exceeds `λ` for every `S` drawn from the
//!    possible parents of `X_j` (its non-descendants other than `X_i`).
//!
//! Pairs where `X_i` is a strict ancestor of `X_j` get conditions 1 and 2.

use std::collections::HashMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fit::LOG_PROB_FLOOR;
use crate::graph::EdgeParams;
use crate::rng::{sigmoid, sigmoid_grad};
use crate::scm::{exact_int_joint, exact_joint, Cgm, JointTable};

/// Values closer to zero than this count as zero in pass/fail decisions.
pub const ZERO_TOL: f64 = 1e-12;

/// All subsets of `items`, by increasing size and then lexicographically.
pub fn ordered_subsets(items: &[usize]) -> Vec<Vec<usize>> {
    let mut out: Vec<Vec<usize>> = vec![vec![]];
    for size in 1..=items.len() {
        let mut idx: Vec<usize> = (0..size).collect();
        loop {
            out.push(idx.iter().map(|&k| items[k]).collect());
            // advance to the next combination
            let mut p = size;
            while p > 0 && idx[p - 1] == items.len() - size + p - 1 {
                p -= 1;
            }
            if p == 0 {
                break;
            }
            idx[p - 1] += 1;
            for q in p..size {
                idx[q] = idx[q - 1] + 1;
            }
        }
    }
    out
}

/// `E_joint[ln p_obs(x_target | x_given)]`, log-probabilities floored at
/// [`LOG_PROB_FLOOR`].
fn expected_log_cond(obs: &JointTable, under: &JointTable, target: usize, given: &[usize]) -> f64 {
    let mut keep = given.to_vec();
    keep.push(target);
    let po = obs.marginalize(&keep).probs;
    let pu = under.marginalize(&keep).probs;
    let c = obs.cards[target];
    let mut total = 0.0;
    for (ro, ru) in po.chunks(c).zip(pu.chunks(c)) {
        let s: f64 = ro.iter().sum();
        for (&a, &b) in ro.iter().zip(ru) {
            if b > 0.0 {
                let lp = if s > 0.0 { (a / s).ln() } else { -(c as f64).ln() };
                total += b * lp.max(LOG_PROB_FLOOR);
            }
        }
    }
    total
}

/// Caches expected log-likelihoods per intervention and conditioning set.
struct Enumerator {
    obs: JointTable,
    ints: Vec<JointTable>,
    memo: HashMap<(usize, usize, Vec<usize>), f64>,
}

impl Enumerator {
    fn new(cgm: &Cgm) -> Result<Self> {
        cgm.validate()?;
        let obs = exact_joint(cgm)?;
        let ints = (0..cgm.n()).map(|t| exact_int_joint(cgm, t)).collect::<Result<_>>()?;
        Ok(Enumerator {
            obs,
            ints,
            memo: HashMap::new(),
        })
    }

    fn expected(&mut self, t: usize, j: usize, mut given: Vec<usize>) -> f64 {
        given.sort_unstable();
        let (obs, ints) = (&self.obs, &self.ints);
        *self
            .memo
            .entry((t, j, given))
            .or_insert_with_key(|(t, j, g)| expected_log_cond(obs, &ints[*t], *j, g))
    }

    /// Gain of adding `i` to `s` when predicting `j`, under intervention `t`.
    fn gain(&mut self, t: usize, i: usize, j: usize, s: &[usize]) -> f64 {
        let mut with = s.to_vec();
        with.push(i);
        self.expected(t, j, with) - self.expected(t, j, s.to_vec())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SubsetValue {
    pub subset: Vec<usize>,
    pub value: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairKind {
    Edge,
    AncestorPair,
}

/// Condition values for one ordered pair `X_i → X_j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairCheck {
    pub i: usize,
    pub j: usize,
    pub kind: PairKind,
    /// Gain under the intervention on `X_i`, per subset of `X_{-i,j}`.
    pub cond1: Vec<SubsetValue>,
    pub cond1_min: f64,
    pub cond1_witness: Vec<usize>,
    pub cond2_max: f64,
    /// Intervention-averaged gain per subset of the possible parents; edges only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cond3: Option<Vec<SubsetValue>>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cond3_min: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub cond3_witness: Option<Vec<usize>>,
}

impl PairCheck {
    pub fn cond1_holds(&self) -> bool {
        self.cond1_min >= -ZERO_TOL
    }

    pub fn cond2_holds(&self) -> bool {
        self.cond2_max > ZERO_TOL
    }

    /// Largest sparsity weight for which condition 3 holds on this edge.
    pub fn lambda_max(&self) -> Option<f64> {
        self.cond3_min
    }

    pub fn holds_at(&self, lambda: f64) -> bool {
        self.cond1_holds() && self.cond2_holds() && self.cond3_min.map_or(true, |m| m > lambda)
    }

    /// Value of condition 1 for one subset, if it was enumerated.
    pub fn cond1_value(&self, subset: &[usize]) -> Option<f64> {
        self.cond1.iter().find(|s| s.subset == subset).map(|s| s.value)
    }

    pub fn cond3_value(&self, subset: &[usize]) -> Option<f64> {
        self.cond3.as_ref()?.iter().find(|s| s.subset == subset).map(|s| s.value)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConditionReport {
    pub names: Vec<String>,
    pub lambda: f64,
    pub pairs: Vec<PairCheck>,
    /// Minimum of `cond3_min` over true edges; `None` when there are no
    /// edges, in which case any λ is admissible.
    pub lambda_max: Option<f64>,
    pub passes: bool,
    /// Pairs whose conditions fail at `lambda`.
    pub failing: Vec<(usize, usize)>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub note: Option<String>,
}

impl ConditionReport {
    pub fn pair(&self, i: usize, j: usize) -> Option<&PairCheck> {
        self.pairs.iter().find(|p| p.i == i && p.j == j)
    }

    /// A plain-text table, one line per pair and subset.
    pub fn to_table(&self) -> String {
        let name = |k: usize| self.names[k].as_str();
        let set = |s: &[usize]| format!("{{{}}}", s.iter().map(|&k| name(k)).collect::<Vec<_>>().join(","));
        let mut out = String::new();
        let _ = writeln!(out, "{:<16} {:<8} {:<14} {:>10} {:>10}", "pair", "kind", "subset", "cond1", "cond3");
        for p in &self.pairs {
            let label = format!("{}->{}", name(p.i), name(p.j));
            let kind = match p.kind {
                PairKind::Edge => "edge",
                PairKind::AncestorPair => "ancestor",
            };
            for s in &p.cond1 {
                let c3 = p
                    .cond3_value(&s.subset)
                    .map_or_else(|| "-".to_string(), |v| format!("{v:.5}"));
                let _ = writeln!(out, "{label:<16} {kind:<8} {:<14} {:>10.5} {c3:>10}", set(&s.subset), s.value);
            }
            if let Some(c3) = &p.cond3 {
                for s in c3.iter().filter(|s| p.cond1_value(&s.subset).is_none()) {
                    let _ = writeln!(out, "{label:<16} {kind:<8} {:<14} {:>10} {:>10.5}", set(&s.subset), "-", s.value);
                }
            }
        }
        let lm = self.lambda_max.map_or_else(|| "inf".to_string(), |v| format!("{v:.5}"));
        let _ = writeln!(out, "lambda_max {lm}");
        let _ = writeln!(
            out,
            "lambda {} {}",
            self.lambda,
            if self.passes { "PASS" } else { "FAIL" }
        );
        for &(i, j) in &self.failing {
            let _ = writeln!(out, "  fails: {}->{}", name(i), name(j));
        }
        out
    }
}

fn min_with_witness(values: &[SubsetValue]) -> (f64, Vec<usize>) {
    let mut best = &values[0];
    for v in &values[1..] {
        if v.value < best.value {
            best = v;
        }
    }
    (best.value, best.subset.clone())
}

/// Evaluates all conditions at sparsity weight `lambda`.
pub fn check_conditions(cgm: &Cgm, lambda: f64) -> Result<ConditionReport> {
    if !(lambda >= 0.0) {
        return Err(Error::param("lambda must be non-negative"));
    }
    let mut en = Enumerator::new(cgm)?;
    let g = &cgm.graph;
    let n = g.n();
    let mut pairs = Vec::new();
    for i in 0..n {
        let desc_i = g.descendants(i);
        for j in 0..n {
            if i == j || !desc_i[j] {
                continue;
            }
            let kind = if g.has_edge(i, j) { PairKind::Edge } else { PairKind::AncestorPair };
            let others: Vec<usize> = (0..n).filter(|&k| k != i && k != j).collect();
            let cond1: Vec<SubsetValue> = ordered_subsets(&others)
                .into_iter()
                .map(|s| SubsetValue {
                    value: en.gain(i, i, j, &s),
                    subset: s,
                })
                .collect();
            let (cond1_min, cond1_witness) = min_with_witness(&cond1);
            let cond2_max = cond1.iter().map(|s| s.value).fold(f64::NEG_INFINITY, f64::max);
            let (cond3, cond3_min, cond3_witness) = if kind == PairKind::Edge {
                let desc_j = g.descendants(j);
                let gpa: Vec<usize> = (0..n).filter(|&k| k != i && k != j && !desc_j[k]).collect();
                let targets: Vec<usize> = (0..n).filter(|&t| t != j).collect();
                let c3: Vec<SubsetValue> = ordered_subsets(&gpa)
                    .into_iter()
                    .map(|s| {
                        let sum: f64 = targets.iter().map(|&t| en.gain(t, i, j, &s)).sum();
                        SubsetValue {
                            value: sum / targets.len() as f64,
                            subset: s,
                        }
                    })
                    .collect();
                let (m, w) = min_with_witness(&c3);
                (Some(c3), Some(m), Some(w))
            } else {
                (None, None, None)
            };
            pairs.push(PairCheck {
                i,
                j,
                kind,
                cond1,
                cond1_min,
                cond1_witness,
                cond2_max,
                cond3,
                cond3_min,
                cond3_witness,
            });
        }
    }
    let lambda_max = pairs.iter().filter_map(|p| p.cond3_min).reduce(f64::min);
    let failing: Vec<(usize, usize)> = pairs
        .iter()
        .filter(|p| !p.holds_at(lambda))
        .map(|p| (p.i, p.j))
        .collect();
    Ok(ConditionReport {
        names: g.vars().iter().map(|v| v.name.clone()).collect(),
        lambda,
        passes: failing.is_empty(),
        failing,
        note: lambda_max
            .is_none()
            .then(|| "graph has no edges; condition 3 is vacuous".to_string()),
        lambda_max,
        pairs,
    })
}

/// Supremum of admissible sparsity weights: the smallest `cond3_min` over
/// the true edges, or `+∞` for a graph without edges.
///
/// ```
/// let chain = causalfit::scm::reference_chain();
/// let m = causalfit::verify::max_lambda(&chain).unwrap();
/// assert!((m - 0.020).abs() < 1e-3);
/// ```
pub fn max_lambda(cgm: &Cgm) -> Result<f64> {
    Ok(check_conditions(cgm, 0.0)?.lambda_max.unwrap_or(f64::INFINITY))
}

/// Exact expectation of the γ gradient estimator for entry `(i, j)`, with
/// the intervention drawn uniformly over all variables. Steps that
/// intervene on `X_j` contribute zero, matching the estimator.
///
/// The inner expectation enumerates every setting of the other entries of
/// column `j` with its probability under `params`.
pub fn exact_gamma_gradient(cgm: &Cgm, params: &EdgeParams, lambda: f64, i: usize, j: usize) -> Result<f64> {
    let n = cgm.n();
    if i >= n || j >= n || i == j {
        return Err(Error::param(format!("invalid pair ({i}, {j})")));
    }
    if params.n() != n {
        return Err(Error::param("parameter size does not match the model"));
    }
    let mut en = Enumerator::new(cgm)?;
    let others: Vec<usize> = (0..n).filter(|&k| k != i && k != j).collect();
    let settings: Vec<(Vec<usize>, f64)> = ordered_subsets(&others)
        .into_iter()
        .map(|s| {
            let w: f64 = others
                .iter()
                .map(|&k| {
                    let p = params.edge_prob(k, j);
                    if s.contains(&k) {
                        p
                    } else {
                        1.0 - p
                    }
                })
                .product();
            (s, w)
        })
        .collect();
    let scale = sigmoid_grad(params.gamma(i, j)) * sigmoid(params.theta(i, j));
    let mut total = 0.0;
    for t in (0..n).filter(|&t| t != j) {
        // NLL difference is the negated log-likelihood gain
        let diff: f64 = settings.iter().map(|(s, w)| -w * en.gain(t, i, j, s)).sum();
        total += scale * (diff + lambda);
    }
    Ok(total / n as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::CausalGraph;
    use crate::scm::{reference_chain, Cpd};

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-3
    }

    #[test]
    fn subset_order() {
        assert_eq!(
            ordered_subsets(&[1, 3, 4]),
            vec![vec![], vec![1], vec![3], vec![4], vec![1, 3], vec![1, 4], vec![3, 4], vec![1, 3, 4]]
        );
        assert_eq!(ordered_subsets(&[]), vec![Vec::<usize>::new()]);
        assert_eq!(ordered_subsets(&[0, 1, 2, 3, 4]).len(), 32);
    }

    #[test]
    fn chain_walkthrough_values() {
        let r = check_conditions(&reference_chain(), 0.004).unwrap();
        let e12 = r.pair(0, 1).unwrap();
        assert!(close(e12.cond1_value(&[]).unwrap(), 0.023));
        assert!(close(e12.cond1_value(&[2]).unwrap(), 0.015));
        assert!(close(e12.cond3_min.unwrap(), 0.020));
        let e23 = r.pair(1, 2).unwrap();
        assert!(close(e23.cond1_value(&[]).unwrap(), 0.194));
        assert!(close(e23.cond1_value(&[0]).unwrap(), 0.200));
        assert!(close(e23.cond3_value(&[]).unwrap(), 0.194));
        assert!(close(e23.cond3_value(&[0]).unwrap(), 0.193));
        assert!(close(e23.cond3_min.unwrap(), 0.193));
        assert_eq!(e23.cond3_witness.as_deref(), Some(&[0][..]));
        let p13 = r.pair(0, 2).unwrap();
        assert_eq!(p13.kind, PairKind::AncestorPair);
        assert!(close(p13.cond1_value(&[]).unwrap(), 0.008));
        assert!(p13.cond1_value(&[1]).unwrap().abs() < 1e-12);
        assert!(p13.cond3.is_none());
        assert!(close(r.lambda_max.unwrap(), 0.020));
        assert_eq!(r.pairs.len(), 3);
        assert!(r.passes);
    }

    #[test]
    fn lambda_boundary() {
        let chain = reference_chain();
        assert!(check_conditions(&chain, 0.019).unwrap().passes);
        let r = check_conditions(&chain, 0.021).unwrap();
        assert!(!r.passes);
        assert_eq!(r.failing, vec![(0, 1)]);
        assert!(r.to_table().contains("fails: X1->X2"));
    }

    #[test]
    fn independent_pair_is_unbounded() {
        let g = CausalGraph::empty(2, 2).unwrap();
        let cpds = vec![
            Cpd::Table {
                parents: vec![],
                card: 2,
                probs: vec![0.3, 0.7],
            },
            Cpd::Table {
                parents: vec![],
                card: 2,
                probs: vec![0.5, 0.5],
            },
        ];
        let cgm = Cgm::new(g, cpds).unwrap();
        assert_eq!(max_lambda(&cgm).unwrap(), f64::INFINITY);
        let r = check_conditions(&cgm, 0.1).unwrap();
        assert!(r.note.is_some());
        assert!(r.passes);
        let p = EdgeParams::zeros(2);
        assert!(exact_gamma_gradient(&cgm, &p, 0.0, 0, 1).unwrap().abs() < 1e-15);
    }

    /// Noisy XOR: `X_3` flips to 1 with probability `1 − ε` when the inputs differ.
    fn xor_fork(eps: f64) -> Cgm {
        let g = CausalGraph::from_edges(CausalGraph::empty(3, 2).unwrap().vars().to_vec(), &[(0, 2), (1, 2)]).unwrap();
        let mut probs = Vec::new();
        for a in 0..2 {
            for b in 0..2 {
                let p1 = if a != b { 1.0 - eps } else { eps };
                probs.extend([1.0 - p1, p1]);
            }
        }
        let root = |_| Cpd::Table {
            parents: vec![],
            card: 2,
            probs: vec![0.5, 0.5],
        };
        Cgm::new(g, vec![root(0), root(1), Cpd::Table { parents: vec![0, 1], card: 2, probs }]).unwrap()
    }

    #[test]
    fn xor_fork_single_parent_gain_is_zero() {
        let r = check_conditions(&xor_fork(0.1), 1e-4).unwrap();
        for (i, other) in [(0, 1), (1, 0)] {
            let p = r.pair(i, 2).unwrap();
            assert!(p.cond1_value(&[]).unwrap().abs() < 1e-12);
            assert!(p.cond1_value(&[other]).unwrap() > 0.1);
            assert!(p.cond3_min.unwrap().abs() < 1e-12);
        }
        assert!(!r.passes);
    }

    #[test]
    fn exact_gradient_sign_and_scaling() {
        let chain = reference_chain();
        let p = EdgeParams::zeros(3);
        let g0 = exact_gamma_gradient(&chain, &p, 0.004, 0, 1).unwrap();
        assert!(g0 < 0.0);
        // same bracket, different prefactor: only γ_01 and θ_01 change
        let mut q = EdgeParams::zeros(3);
        q.set_gamma(0, 1, 1.3);
        q.set_theta(0, 1, -0.7);
        let g1 = exact_gamma_gradient(&chain, &q, 0.004, 0, 1).unwrap();
        let f0 = sigmoid_grad(0.0) * sigmoid(0.0);
        let f1 = sigmoid_grad(1.3) * sigmoid(-0.7);
        assert!((g1 / f1 - g0 / f0).abs() < 1e-12);
        assert!(exact_gamma_gradient(&chain, &p, 0.0, 1, 1).is_err());
    }
}
