//! Neighborhood-aggregated OOD scores, score regularization and
//! clustering-then-ranking candidate selection.
//!
//! For node `i` with known-class entropy `ent_i` (normalized to `[0, 1]`)
//! and unknown-class probability `u_i = p_{i,C+1}`:
//!
//! ```text
//! score_i = ent_i + u_i + mean_{j ∈ N(i)} (ent_j + u_j)
//! ```
//!
//! Isolated nodes contribute no neighbor term.

mod kmeans;

use std::sync::Arc;

use serde::{Deserialize, Serialize};

pub use kmeans::{kmeans_1d, KMeans1d, MAX_ITERATIONS as KMEANS_MAX_ITERATIONS};

use crate::autodiff::{Tape, Var};
use crate::encoder::PROB_FLOOR;
use crate::error::{invalid, Result};
use crate::graph::Graph;
use crate::tensor::{argmax, Matrix};

/// Which distribution the known-class entropy is computed over.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntropyMode {
    /// `p_1..p_C` renormalized to sum to one.
    #[default]
    Renormalized,
    /// `p_1..p_C` as they are.
    Raw,
}

/// Normalized Shannon entropy over the first `c` entries of a probability
/// row, using `0 · ln 0 = 0`. Returns 1 (maximal uncertainty) when the known
/// mass is zero, and 0 when `c < 2`.
pub fn normalized_entropy(prob_row: &[f64], c: usize, mode: EntropyMode) -> f64 {
    if c < 2 {
        return 0.0;
    }
    let known = &prob_row[..c];
    let mass: f64 = known.iter().sum();
    let denom = match mode {
        EntropyMode::Renormalized => {
            if mass <= 0.0 {
                log::warn!("known-class mass is zero; entropy set to 1");
                return 1.0;
            }
            mass
        }
        EntropyMode::Raw => 1.0,
    };
    let h: f64 = known
        .iter()
        .map(|&p| p / denom)
        .filter(|&q| q > 0.0)
        .map(|q| -q * q.ln())
        .sum();
    h / (c as f64).ln()
}

/// Neighbor lists arranged for segment ops, plus `1/|N(i)|` (0 if isolated).
#[derive(Debug, Clone)]
pub struct NeighborIndex {
    pub num_nodes: usize,
    pub centers: Arc<[usize]>,
    pub sources: Arc<[usize]>,
    pub inv_degree: Matrix,
}

impl NeighborIndex {
    pub fn new(graph: &Graph) -> Self {
        let (centers, sources) = graph.neighbor_pairs();
        let inv = (0..graph.num_nodes())
            .map(|i| match graph.degree(i) {
                0 => 0.0,
                d => 1.0 / d as f64,
            })
            .collect();
        Self {
            num_nodes: graph.num_nodes(),
            centers: centers.into(),
            sources: sources.into(),
            inv_degree: Matrix::column(inv),
        }
    }
}

/// Tape handles for the score components (all `N × 1`).
#[derive(Debug, Clone, Copy)]
pub struct OodVars {
    pub scores: Var,
    pub entropy: Var,
    pub p_unknown: Var,
}

/// Differentiable OOD scores from an `N × (C+1)` probability matrix.
pub fn ood_score_on_tape(
    tape: &mut Tape,
    probs: Var,
    index: &NeighborIndex,
    mode: EntropyMode,
) -> Result<OodVars> {
    let width = tape.shape(probs).1;
    if width < 2 {
        return Err(invalid("probabilities need at least two columns"));
    }
    let c = width - 1;
    let p_unknown = tape.slice_cols(probs, c, width)?;

    let entropy = if c < 2 {
        tape.constant(Matrix::zeros(tape.shape(probs).0, 1))
    } else {
        let known = tape.slice_cols(probs, 0, c)?;
        let q = match mode {
            EntropyMode::Renormalized => {
                let mass = tape.sum_rows(known);
                let mass = tape.clamp(mass, f64::MIN_POSITIVE, f64::INFINITY);
                tape.div(known, mass)?
            }
            EntropyMode::Raw => known,
        };
        let qc = tape.clamp(q, PROB_FLOOR, 1.0);
        let lq = tape.log(qc)?;
        let t = tape.mul(q, lq)?;
        let s = tape.sum_rows(t);
        tape.scale(s, -1.0 / (c as f64).ln())
    };

    let own = tape.add(entropy, p_unknown)?;
    let gathered = tape.gather_rows(own, index.sources.clone())?;
    let summed = tape.segment_sum(gathered, index.centers.clone(), index.num_nodes)?;
    let inv = tape.constant(index.inv_degree.clone());
    let nbr = tape.mul(summed, inv)?;
    let scores = tape.add(own, nbr)?;
    Ok(OodVars { scores, entropy, p_unknown })
}

/// Per-node OOD scores together with their ingredients.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodScoreVector {
    pub scores: Vec<f64>,
    pub entropy: Vec<f64>,
    pub p_unknown: Vec<f64>,
}

/// OOD scores for every node of `graph`.
pub fn ood_score(graph: &Graph, probs: &Matrix, mode: EntropyMode) -> Result<OodScoreVector> {
    if probs.rows() != graph.num_nodes() {
        return Err(invalid("probability rows do not match node count"));
    }
    let mut tape = Tape::new();
    let p = tape.constant(probs.clone());
    let v = ood_score_on_tape(&mut tape, p, &NeighborIndex::new(graph), mode)?;
    let col = |var: Var| tape.value(var).as_slice().to_vec();
    Ok(OodScoreVector { scores: col(v.scores), entropy: col(v.entropy), p_unknown: col(v.p_unknown) })
}

/// `mean(score[labeled]) − mean(score[candidates])`, or `None` when there
/// are no OOD candidates this epoch.
pub fn ood_regularization_on_tape(
    tape: &mut Tape,
    scores: Var,
    labeled: &[usize],
    ood_candidates: &[usize],
) -> Result<Option<Var>> {
    if labeled.is_empty() {
        return Err(invalid("OOD regularization needs labeled nodes"));
    }
    if ood_candidates.is_empty() {
        return Ok(None);
    }
    let a = tape.gather_rows(scores, Arc::from(labeled))?;
    let a = tape.mean_scalar(a)?;
    let b = tape.gather_rows(scores, Arc::from(ood_candidates))?;
    let b = tape.mean_scalar(b)?;
    Ok(Some(tape.sub(a, b)?))
}

/// Plain-value form of [`ood_regularization_on_tape`].
pub fn ood_regularization_loss(scores: &[f64], labeled: &[usize], ood_candidates: &[usize]) -> Result<Option<f64>> {
    let mut tape = Tape::new();
    let s = tape.constant(Matrix::column(scores.to_vec()));
    Ok(ood_regularization_on_tape(&mut tape, s, labeled, ood_candidates)?.map(|v| tape.value(v).item()))
}

/// How candidates are chosen from the unlabeled scores.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Selection {
    /// 2-means on the scores, then nearest-to-centroid within each cluster.
    #[default]
    ClusterThenRank,
    /// Highest scores become OOD candidates, lowest become ID candidates.
    RankOnly,
}

/// Selected potential-OOD and potential-ID nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CandidateSets {
    pub ood: Vec<usize>,
    pub id: Vec<usize>,
    /// Pseudo-label of each `id` node (argmax over known classes).
    pub id_labels: Vec<usize>,
    /// Pseudo-label of every `ood` node, the unknown class index `C`.
    pub ood_label: usize,
    pub centroid_low: f64,
    pub centroid_high: f64,
    /// Clustering collapsed because all unlabeled scores were equal.
    pub degenerate: bool,
    /// A cluster was smaller than the quota and was taken whole.
    pub shortfall: bool,
}

fn quota(rho_percent: f64, n: usize) -> usize {
    (rho_percent / 100.0 * n as f64 + 0.5).floor() as usize
}

/// Members of `pool` sorted by `key` ascending, ties by node id, first `k`.
fn nearest(pool: Vec<usize>, k: usize, key: impl Fn(usize) -> f64) -> Vec<usize> {
    let mut pool = pool;
    pool.sort_by(|&a, &b| key(a).total_cmp(&key(b)).then(a.cmp(&b)));
    pool.truncate(k);
    pool.sort_unstable();
    pool
}

/// Select up to `round(ρ% · |unlabeled|)` potential-OOD and potential-ID
/// nodes from `unlabeled` and attach pseudo-labels from `probs`.
pub fn select_candidates(
    scores: &[f64],
    probs: &Matrix,
    unlabeled: &[usize],
    rho_percent: f64,
    selection: Selection,
) -> Result<CandidateSets> {
    if !(rho_percent > 0.0 && rho_percent <= 100.0) {
        return Err(invalid(format!("rho must be in (0, 100], got {rho_percent}")));
    }
    if unlabeled.len() < 2 {
        return Err(invalid("need at least two unlabeled nodes"));
    }
    let c = probs.cols() - 1;
    let k = quota(rho_percent, unlabeled.len());
    let vals: Vec<f64> = unlabeled.iter().map(|&i| scores[i]).collect();

    let (ood, id, centroid_low, centroid_high, degenerate, shortfall) = match selection {
        Selection::ClusterThenRank => {
            let km = kmeans_1d(&vals);
            let (mut hi, mut lo) = (Vec::new(), Vec::new());
            for (&node, &h) in unlabeled.iter().zip(&km.high) {
                if h { hi.push(node) } else { lo.push(node) }
            }
            let shortfall = (!km.degenerate && hi.len() < k) || lo.len() < k;
            let ood = if km.degenerate {
                log::warn!("all unlabeled OOD scores are equal; no OOD candidates selected");
                Vec::new()
            } else {
                nearest(hi, k, |i| (scores[i] - km.centroid_high).abs())
            };
            let id = nearest(lo, k, |i| (scores[i] - km.centroid_low).abs());
            (ood, id, km.centroid_low, km.centroid_high, km.degenerate, shortfall)
        }
        Selection::RankOnly => {
            let k = k.min(unlabeled.len() / 2);
            let ood = nearest(unlabeled.to_vec(), k, |i| -scores[i]);
            let id = nearest(unlabeled.to_vec(), k, |i| scores[i]);
            let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            (ood, id, lo, hi, false, false)
        }
    };
    if shortfall {
        log::debug!("candidate quota {k} exceeds a cluster; whole cluster taken");
    }
    let id_labels = id.iter().map(|&i| argmax(&probs.row(i)[..c])).collect();
    Ok(CandidateSets { ood, id, id_labels, ood_label: c, centroid_low, centroid_high, degenerate, shortfall })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn entropy_examples() {
        let m = EntropyMode::Renormalized;
        assert!((normalized_entropy(&[0.25, 0.25, 0.5], 2, m) - 1.0).abs() < 1e-12);
        assert_eq!(normalized_entropy(&[0.6, 0.0, 0.4], 2, m), 0.0);
        // -(0.75 ln 0.75 + 0.25 ln 0.25) / ln 2
        let direct = -(0.75f64 * 0.75f64.ln() + 0.25 * 0.25f64.ln()) / 2f64.ln();
        let got = normalized_entropy(&[0.75, 0.25, 0.0], 2, m);
        assert!((got - direct).abs() < 1e-12);
        assert!((got - 0.8113).abs() < 1e-4);
        assert_eq!(normalized_entropy(&[0.0, 0.0, 1.0], 2, m), 1.0);
    }

    #[test]
    fn score_by_hand() {
        // centre 0 with two leaf neighbours
        let g = Graph::new(Matrix::zeros(3, 1), [(0, 1), (0, 2)], None, 0).unwrap();
        // C = 2. Rows are chosen so ent + p_unknown is 0.7, 0.4, 0.6.
        let row = |ent_target: f64, pu: f64| -> Vec<f64> {
            // find q with binary entropy ent_target
            let (mut a, mut b) = (0.0, 0.5);
            for _ in 0..200 {
                let m = 0.5 * (a + b);
                if normalized_entropy(&[m, 1.0 - m, 0.0], 2, EntropyMode::Renormalized) < ent_target { a = m } else { b = m }
            }
            let q = 0.5 * (a + b);
            vec![q * (1.0 - pu), (1.0 - q) * (1.0 - pu), pu]
        };
        let probs = Matrix::from_rows(&[row(0.5, 0.2), row(0.3, 0.1), row(0.4, 0.2)]).unwrap();
        let s = ood_score(&g, &probs, EntropyMode::Renormalized).unwrap();
        assert!((s.scores[0] - 1.2).abs() < 1e-9, "{}", s.scores[0]);
    }

    #[test]
    fn isolated_node_has_no_neighbor_term() {
        let g = Graph::new(Matrix::zeros(1, 1), [], None, 0).unwrap();
        let probs = Matrix::from_rows(&[[0.7, 0.2, 0.1]]).unwrap();
        let s = ood_score(&g, &probs, EntropyMode::Renormalized).unwrap();
        assert!((s.scores[0] - (s.entropy[0] + 0.1)).abs() < 1e-15);
    }

    #[test]
    fn uniform_predictions_score_eight_thirds() {
        let g = Graph::new(Matrix::zeros(4, 1), [(0, 1), (1, 2), (2, 3)], None, 0).unwrap();
        let probs = Matrix::filled(4, 3, 1.0 / 3.0);
        let s = ood_score(&g, &probs, EntropyMode::Renormalized).unwrap();
        for v in s.scores {
            assert!((v - 8.0 / 3.0).abs() < 1e-12);
        }
    }

    #[test]
    fn regularization_examples() {
        let scores = [1.0, 1.0, 3.0, 3.0];
        assert_eq!(ood_regularization_loss(&scores, &[0, 1], &[2, 3]).unwrap(), Some(-2.0));
        assert_eq!(ood_regularization_loss(&[2.0, 2.0], &[0], &[1]).unwrap(), Some(0.0));
        assert_eq!(ood_regularization_loss(&scores, &[0], &[]).unwrap(), None);
        assert!(ood_regularization_loss(&scores, &[], &[1]).is_err());
    }

    #[test]
    fn regularization_gradient_signs() {
        let mut tape = Tape::new();
        let s = tape.param(Matrix::column(vec![1.0, 2.0, 3.0, 4.0, 5.0]));
        let l = ood_regularization_on_tape(&mut tape, s, &[0, 1], &[2, 3, 4]).unwrap().unwrap();
        tape.backward(l).unwrap();
        let g = tape.grad(s).unwrap().as_slice();
        assert!((g[0] - 0.5).abs() < 1e-15 && (g[1] - 0.5).abs() < 1e-15);
        for &gi in &g[2..] {
            assert!((gi + 1.0 / 3.0).abs() < 1e-15);
        }
    }

    fn uniform_probs(n: usize) -> Matrix {
        Matrix::filled(n, 3, 1.0 / 3.0)
    }

    #[test]
    fn cluster_then_rank_example() {
        let scores = [0.1, 0.2, 3.0, 3.1];
        let c = select_candidates(&scores, &uniform_probs(4), &[0, 1, 2, 3], 50.0, Selection::ClusterThenRank).unwrap();
        assert_eq!(c.id, vec![0, 1]);
        assert_eq!(c.ood, vec![2, 3]);
        assert_eq!(c.ood_label, 2);
        assert!((c.centroid_low - 0.15).abs() < 1e-12);
    }

    #[test]
    fn full_quota_takes_everything() {
        let scores = [0.1, 0.5, 0.2, 3.0, 3.1, 2.5];
        let all = [0, 1, 2, 3, 4, 5];
        let c = select_candidates(&scores, &uniform_probs(6), &all, 100.0, Selection::ClusterThenRank).unwrap();
        let mut got: Vec<usize> = c.ood.iter().chain(&c.id).copied().collect();
        got.sort();
        assert_eq!(got, all);
        assert!(c.shortfall);
    }

    #[test]
    fn equal_scores_select_no_ood() {
        let scores = [1.0; 5];
        let c = select_candidates(&scores, &uniform_probs(5), &[0, 1, 2, 3, 4], 40.0, Selection::ClusterThenRank).unwrap();
        assert!(c.degenerate);
        assert!(c.ood.is_empty());
        assert_eq!(c.id, vec![0, 1]);
    }

    #[test]
    fn id_pseudo_labels_ignore_unknown_column() {
        let probs = Matrix::from_rows(&[[0.1, 0.2, 0.7], [0.3, 0.3, 0.4], [0.0, 0.0, 1.0], [0.0, 0.0, 1.0]]).unwrap();
        let c = select_candidates(&[0.0, 0.1, 5.0, 5.0], &probs, &[0, 1, 2, 3], 50.0, Selection::ClusterThenRank).unwrap();
        assert_eq!(c.id_labels, vec![1, 0]);
    }

    #[test]
    fn rank_only_takes_extremes() {
        let scores = [0.5, 0.1, 0.9, 0.3, 0.7];
        let c = select_candidates(&scores, &uniform_probs(5), &[0, 1, 2, 3, 4], 40.0, Selection::RankOnly).unwrap();
        assert_eq!(c.ood, vec![2, 4]);
        assert_eq!(c.id, vec![1, 3]);
    }
}
