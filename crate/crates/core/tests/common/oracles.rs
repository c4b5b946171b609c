//! Slow reference implementations.

/// AUROC by comparing every OOD/ID pair; ties count one half. Returned as
/// `(2·wins + ties) / (2·pairs)` so it is exact in the same arithmetic.
pub fn auroc_pairs(scores: &[f64], is_ood: &[bool]) -> f64 {
    let (mut twice, mut pairs) = (0u64, 0u64);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if is_ood[i] && !is_ood[j] {
                pairs += 1;
                twice += if si > sj { 2 } else if si == sj { 1 } else { 0 };
            }
        }
    }
    twice as f64 / (2 * pairs) as f64
}

/// Sweep every observed score as a threshold (`score ≥ t` is flagged) and
/// report the ID false-positive rate at the largest threshold whose OOD
/// recall reaches 95%.
pub fn fpr95_sweep(scores: &[f64], is_ood: &[bool]) -> f64 {
    let n_ood = is_ood.iter().filter(|&&o| o).count();
    let n_id = is_ood.len() - n_ood;
    let mut best: Option<f64> = None;
    for &t in scores {
        let hits = scores.iter().zip(is_ood).filter(|&(&s, &o)| o && s >= t).count();
        // recall ≥ 0.95 in integers
        if 100 * hits >= 95 * n_ood && best.is_none_or(|b| t > b) {
            best = Some(t);
        }
    }
    let t = best.expect("the minimum score always reaches full recall");
    scores.iter().zip(is_ood).filter(|&(&s, &o)| !o && s >= t).count() as f64 / n_id as f64
}

/// Lowest two-cluster SSE over every split of the sorted values.
pub fn best_split_sse(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let sse = |s: &[f64]| {
        let m = s.iter().sum::<f64>() / s.len() as f64;
        s.iter().map(|x| (x - m) * (x - m)).sum::<f64>()
    };
    (1..v.len()).map(|k| sse(&v[..k]) + sse(&v[k..])).fold(f64::INFINITY, f64::min)
}
