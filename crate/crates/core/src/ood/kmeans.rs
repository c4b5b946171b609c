//! Two-cluster Lloyd iteration on scalars.

/// Result of [`kmeans_1d`]. `high[i]` tells whether value `i` joined the
/// high cluster.
#[derive(Debug, Clone, PartialEq)]
pub struct KMeans1d {
    pub high: Vec<bool>,
    pub centroid_low: f64,
    pub centroid_high: f64,
    pub iterations: usize,
    /// All values were equal; everything sits in the low cluster.
    pub degenerate: bool,
}

impl KMeans1d {
    /// Sum of squared distances to the assigned centroid.
    pub fn sse(&self, values: &[f64]) -> f64 {
        values
            .iter()
            .zip(&self.high)
            .map(|(&v, &h)| {
                let c = if h { self.centroid_high } else { self.centroid_low };
                (v - c) * (v - c)
            })
            .sum()
    }
}

pub const MAX_ITERATIONS: usize = 200;

/// k = 2 Lloyd iterations started from the minimum and maximum value, run
/// until the assignment stops changing or [`MAX_ITERATIONS`] is hit.
/// A value equidistant from both centroids joins the low cluster.
///
/// Lloyd can stall in a local optimum. In one dimension the optimal
/// partition is a prefix/suffix split of the sorted values, found exactly
/// with prefix sums; when it beats the Lloyd result, Lloyd is restarted from
/// its centroids (the optimum is a fixpoint, so it stays there).
///
/// # Panics
/// If `values` has fewer than two entries.
pub fn kmeans_1d(values: &[f64]) -> KMeans1d {
    assert!(values.len() >= 2, "kmeans_1d needs at least two values");
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if lo == hi {
        return KMeans1d {
            high: vec![false; values.len()],
            centroid_low: lo,
            centroid_high: hi,
            iterations: 0,
            degenerate: true,
        };
    }

    // Work on a sorted copy so sums, and therefore centroids, do not depend
    // on input order. Clusters are then a prefix (low) and a suffix (high).
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);

    let (mut c_lo, mut c_hi, mut iterations) = lloyd(&sorted, lo, hi);
    let (best_lo, best_hi, best_sse) = best_split(&sorted);
    if best_sse < split_sse(&sorted, c_lo, c_hi) * (1.0 - 1e-12) {
        let (l, h, it) = lloyd(&sorted, best_lo, best_hi);
        (c_lo, c_hi) = (l, h);
        iterations += it;
    }
    let high = values.iter().map(|&v| (v - c_hi).abs() < (v - c_lo).abs()).collect();
    KMeans1d { high, centroid_low: c_lo, centroid_high: c_hi, iterations, degenerate: false }
}

fn mean(s: &[f64]) -> f64 {
    s.iter().sum::<f64>() / s.len() as f64
}

/// Lloyd iterations on sorted values from the given centroids.
fn lloyd(sorted: &[f64], mut c_lo: f64, mut c_hi: f64) -> (f64, f64, usize) {
    let mut split = usize::MAX;
    let mut iterations = 0;
    for it in 0..MAX_ITERATIONS {
        iterations = it + 1;
        let next = sorted.partition_point(|&v| (v - c_hi).abs() >= (v - c_lo).abs());
        if next == split {
            break;
        }
        split = next;
        if split > 0 {
            c_lo = mean(&sorted[..split]);
        }
        if split < sorted.len() {
            c_hi = mean(&sorted[split..]);
        }
    }
    (c_lo, c_hi, iterations)
}

fn split_sse(sorted: &[f64], c_lo: f64, c_hi: f64) -> f64 {
    sorted
        .iter()
        .map(|&v| {
            let d = (v - c_lo).abs().min((v - c_hi).abs());
            d * d
        })
        .sum()
}

/// Centroids and SSE of the best prefix/suffix split.
fn best_split(sorted: &[f64]) -> (f64, f64, f64) {
    let n = sorted.len();
    let (total, total_sq): (f64, f64) = sorted.iter().fold((0.0, 0.0), |(s, q), &v| (s + v, q + v * v));
    let (mut s, mut q) = (0.0, 0.0);
    let mut best = (sorted[0], sorted[n - 1], f64::INFINITY);
    for k in 1..n {
        s += sorted[k - 1];
        q += sorted[k - 1] * sorted[k - 1];
        if sorted[k - 1] == sorted[k] {
            continue; // equal values always share a cluster
        }
        let (kl, kr) = (k as f64, (n - k) as f64);
        let (sr, qr) = (total - s, total_sq - q);
        let sse = (q - s * s / kl) + (qr - sr * sr / kr);
        if sse < best.2 {
            best = (s / kl, sr / kr, sse);
        }
    }
    best
}
