use rand::RngExt;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::Graph;
use crate::error::{invalid, Result};
use crate::rng;
use crate::tensor::Matrix;

/// Parameters of a stochastic block model with Gaussian class features.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SbmParams {
    pub n_per_class: usize,
    pub classes: usize,
    pub p_in: f64,
    pub p_out: f64,
    pub feat_dim: usize,
    pub feat_shift: f64,
    pub seed: u64,
}

impl SbmParams {
    /// The separable fixture used by the end-to-end checks: 4 classes of 60,
    /// dense blocks, class means 3 apart along distinct axes.
    pub fn separable_fixture(seed: u64) -> Self {
        Self { n_per_class: 60, classes: 4, p_in: 0.3, p_out: 0.01, feat_dim: 16, feat_shift: 3.0, seed }
    }
}

/// Sample an SBM graph. Node `i` belongs to class `i / n_per_class`. Each
/// feature row is standard normal noise plus `feat_shift` along axis `c`
/// for class `c`.
pub fn synth_sbm(p: &SbmParams) -> Result<Graph> {
    if p.classes < 2 {
        return Err(invalid("need at least 2 classes"));
    }
    if !(0.0..=1.0).contains(&p.p_in) || !(0.0..=1.0).contains(&p.p_out) || p.p_out > p.p_in {
        return Err(invalid(format!("need 0 <= p_out <= p_in <= 1, got {} / {}", p.p_out, p.p_in)));
    }
    if p.feat_dim < p.classes {
        return Err(invalid("feat_dim must be at least the class count"));
    }
    let n = p.n_per_class * p.classes;
    let labels: Vec<usize> = (0..n).map(|i| i / p.n_per_class).collect();

    let mut er = rng::stream(p.seed, "sbm-edges");
    let mut edges = Vec::new();
    for i in 0..n {
        for j in i + 1..n {
            let prob = if labels[i] == labels[j] { p.p_in } else { p.p_out };
            if er.random::<f64>() < prob {
                edges.push((i, j));
            }
        }
    }

    let mut fr = rng::stream(p.seed, "sbm-features");
    let mut features = Matrix::zeros(n, p.feat_dim);
    for i in 0..n {
        let row = features.row_mut(i);
        for x in row.iter_mut() {
            *x = StandardNormal.sample(&mut fr);
        }
        row[labels[i]] += p.feat_shift;
    }

    Graph::new(features, edges, Some(labels), p.classes)
}
