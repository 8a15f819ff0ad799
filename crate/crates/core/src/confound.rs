//! Split edge-existence logits and the latent-confounder score.
//!
//! `γ = γ_I + γ_O`: entry `(i, j)` of `γ_I` only learns from steps that
//! intervene on `X_i`, `γ_O` from all other steps. A latent common cause
//! of `X_i` and `X_j` looks like an edge in both directions to `γ_O` but
//! like no edge to `γ_I`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::graph::CausalGraph;
use crate::model::{AdamState, Optimizer};
use crate::rng::sigmoid;

#[derive(Clone, Debug, PartialEq)]
pub struct SplitGamma {
    n: usize,
    pub gamma_i: Vec<f64>,
    pub gamma_o: Vec<f64>,
    opt_i: Optimizer,
    opt_o: Optimizer,
}

impl SplitGamma {
    /// Zero logits, each half with its own Adam state.
    pub fn new(n: usize, lr: f64, betas: (f64, f64)) -> Self {
        let adam = || Optimizer::Adam(AdamState::new(n * n, lr, betas, 1e-8, 0.0));
        Self::with_optimizers(n, adam(), adam())
    }

    pub fn with_optimizers(n: usize, opt_i: Optimizer, opt_o: Optimizer) -> Self {
        SplitGamma {
            n,
            gamma_i: vec![0.0; n * n],
            gamma_o: vec![0.0; n * n],
            opt_i,
            opt_o,
        }
    }

    pub fn n(&self) -> usize {
        self.n
    }

    /// The effective logit `γ_I + γ_O`.
    pub fn gamma(&self, i: usize, j: usize) -> f64 {
        self.gamma_i[i * self.n + j] + self.gamma_o[i * self.n + j]
    }

    /// Routes row `target` of `grad` to `γ_I` and every other row to `γ_O`.
    /// Entries with `mask[k] == false` are left alone.
    pub fn split_update(&mut self, grad: &[f64], mask: &[bool], target: usize) -> Result<()> {
        let n = self.n;
        if grad.len() != n * n || mask.len() != n * n || target >= n {
            return Err(Error::param("gradient, mask or target does not match the split logits"));
        }
        let mut in_row = vec![false; n * n];
        let mut out_row = vec![false; n * n];
        for k in 0..n * n {
            if mask[k] && k / n != k % n {
                if k / n == target {
                    in_row[k] = true;
                } else {
                    out_row[k] = true;
                }
            }
        }
        self.opt_i.update_masked(&mut self.gamma_i, grad, &in_row)?;
        self.opt_o.update_masked(&mut self.gamma_o, grad, &out_row)
    }
}

/// `σ(γO_ij)·σ(γO_ji)·(1−σ(γI_ij))·(1−σ(γI_ji))`.
///
/// ```
/// use causalfit::confound::{lc_score, SplitGamma};
/// let sg = SplitGamma::new(3, 0.02, (0.9, 0.9));
/// assert!((lc_score(&sg, 0, 2).unwrap() - 0.0625).abs() < 1e-12);
/// ```
pub fn lc_score(sg: &SplitGamma, i: usize, j: usize) -> Result<f64> {
    let n = sg.n;
    if i == j || i >= n || j >= n {
        return Err(Error::param(format!("invalid pair ({i}, {j})")));
    }
    let o = |a: usize, b: usize| sigmoid(sg.gamma_o[a * n + b]);
    let ii = |a: usize, b: usize| 1.0 - sigmoid(sg.gamma_i[a * n + b]);
    Ok(o(i, j) * o(j, i) * ii(i, j) * ii(j, i))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PairScore {
    pub i: usize,
    pub j: usize,
    pub score: f64,
    pub flagged: bool,
}

/// Scores for every unordered pair, in `(i, j)`, `i < j` order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ConfounderReport {
    pub pairs: Vec<PairScore>,
}

impl ConfounderReport {
    pub fn flagged(&self) -> impl Iterator<Item = &PairScore> {
        self.pairs.iter().filter(|p| p.flagged)
    }

    pub fn score(&self, i: usize, j: usize) -> Option<f64> {
        let (a, b) = (i.min(j), i.max(j));
        self.pairs.iter().find(|p| p.i == a && p.j == b).map(|p| p.score)
    }
}

/// Flags pairs whose score exceeds `tau`.
pub fn detect_confounders(sg: &SplitGamma, tau: f64) -> Result<ConfounderReport> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(Error::param(format!("threshold must lie in (0, 1), got {tau}")));
    }
    let mut pairs = Vec::new();
    for i in 0..sg.n {
        for j in i + 1..sg.n {
            let score = lc_score(sg, i, j)?;
            pairs.push(PairScore {
                i,
                j,
                score,
                flagged: score > tau,
            });
        }
    }
    Ok(ConfounderReport { pairs })
}

/// Removes edges in either direction between flagged pairs: a pair that
/// shares a latent cause is explained by it, not by a direct edge.
pub fn drop_flagged_edges(g: &mut CausalGraph, report: &ConfounderReport) {
    for p in report.flagged() {
        if p.i < g.n() && p.j < g.n() {
            g.remove_edge(p.i, p.j);
            g.remove_edge(p.j, p.i);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn score_limits() {
        let mut sg = SplitGamma::new(2, 0.1, (0.9, 0.9));
        sg.gamma_o = vec![0.0, 1e3, 1e3, 0.0];
        sg.gamma_i = vec![0.0, -1e3, -1e3, 0.0];
        assert!((lc_score(&sg, 0, 1).unwrap() - 1.0).abs() < 1e-12);
        sg.gamma_i[1] = 1e3;
        assert!(lc_score(&sg, 0, 1).unwrap() < 1e-12);
        assert!(lc_score(&sg, 1, 1).is_err());
    }

    #[test]
    fn routing_by_target_row() {
        let mut sg = SplitGamma::new(3, 0.1, (0.9, 0.9));
        let grad = vec![1.0; 9];
        sg.split_update(&grad, &[true; 9], 0).unwrap();
        assert!(sg.gamma_i[1] != 0.0 && sg.gamma_i[2] != 0.0);
        assert_eq!(sg.gamma_o[1], 0.0);
        assert_eq!(sg.gamma_i[3], 0.0);
        assert!(sg.gamma_o[3] != 0.0);
        assert_eq!(sg.gamma_i[0], 0.0);
        assert_eq!(sg.gamma_o[0], 0.0);
        // a zero gradient on fresh optimizer state moves nothing
        let mut fresh = SplitGamma::new(3, 0.1, (0.9, 0.9));
        fresh.split_update(&[0.0; 9], &[true; 9], 1).unwrap();
        assert!(fresh.gamma_i.iter().chain(&fresh.gamma_o).all(|&x| x == 0.0));
    }

    #[test]
    fn report_covers_all_pairs() {
        let sg = SplitGamma::new(5, 0.1, (0.9, 0.9));
        let r = detect_confounders(&sg, 0.4).unwrap();
        assert_eq!(r.pairs.len(), 10);
        assert_eq!(r.flagged().count(), 0);
        let json = serde_json::to_value(&r).unwrap();
        assert!(json.is_array());
        assert!(detect_confounders(&sg, 1.0).is_err());
    }

    #[test]
    fn flagged_pairs_lose_their_edges() {
        let mut sg = SplitGamma::new(3, 0.1, (0.9, 0.9));
        sg.gamma_o[1] = 1e3;
        sg.gamma_o[3] = 1e3;
        sg.gamma_i[1] = -1e3;
        sg.gamma_i[3] = -1e3;
        let r = detect_confounders(&sg, 0.4).unwrap();
        let mut g = CausalGraph::from_edges(CausalGraph::empty(3, 2).unwrap().vars().to_vec(), &[(0, 1), (1, 2)]).unwrap();
        drop_flagged_edges(&mut g, &r);
        assert_eq!(g.edges(), vec![(1, 2)]);
    }
}
