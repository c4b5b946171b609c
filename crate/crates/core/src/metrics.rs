//! Open-set classification and OOD-detection metrics.

use serde::{Deserialize, Serialize};

use crate::error::{invalid, Result};

/// Which per-node value is used as the OOD detection score.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScoreKind {
    /// Neighborhood-aggregated OOD score.
    #[default]
    OodScore,
    /// Probability of the unknown class.
    PUnknown,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ClassRow {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    pub predicted: usize,
}

/// Per-class precision/recall/F1 over `num_classes` classes. Undefined
/// precision or recall counts as 0, and so does the resulting F1.
pub fn per_class(pred: &[usize], truth: &[usize], num_classes: usize) -> Result<Vec<ClassRow>> {
    if pred.len() != truth.len() {
        return Err(invalid("prediction and truth lengths differ"));
    }
    if pred.iter().chain(truth).any(|&y| y >= num_classes) {
        return Err(invalid(format!("label outside {num_classes} classes")));
    }
    let mut tp = vec![0usize; num_classes];
    let mut np = vec![0usize; num_classes];
    let mut nt = vec![0usize; num_classes];
    for (&p, &t) in pred.iter().zip(truth) {
        np[p] += 1;
        nt[t] += 1;
        if p == t {
            tp[p] += 1;
        }
    }
    Ok((0..num_classes)
        .map(|k| {
            let precision = if np[k] > 0 { tp[k] as f64 / np[k] as f64 } else { 0.0 };
            let recall = if nt[k] > 0 { tp[k] as f64 / nt[k] as f64 } else { 0.0 };
            let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
            ClassRow { precision, recall, f1, support: nt[k], predicted: np[k] }
        })
        .collect())
}

/// Accuracy and macro-F1 over the nodes where `mask` is set.
pub fn accuracy_macro_f1(pred: &[usize], truth: &[usize], mask: &[bool], num_classes: usize) -> Result<(f64, f64)> {
    if pred.len() != mask.len() || truth.len() != mask.len() {
        return Err(invalid("prediction, truth and mask lengths differ"));
    }
    let (p, t): (Vec<usize>, Vec<usize>) =
        (0..mask.len()).filter(|&i| mask[i]).map(|i| (pred[i], truth[i])).unzip();
    if p.is_empty() {
        return Err(invalid("empty test set"));
    }
    let correct = p.iter().zip(&t).filter(|(a, b)| a == b).count();
    let rows = per_class(&p, &t, num_classes)?;
    let macro_f1 = rows.iter().map(|r| r.f1).sum::<f64>() / num_classes as f64;
    Ok((correct as f64 / p.len() as f64, macro_f1))
}

fn split_scores(scores: &[f64], is_ood: &[bool]) -> Result<(Vec<f64>, Vec<f64>)> {
    if scores.len() != is_ood.len() {
        return Err(invalid("score and label lengths differ"));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(invalid("NaN detection score"));
    }
    let (mut id, mut ood) = (Vec::new(), Vec::new());
    for (&s, &o) in scores.iter().zip(is_ood) {
        if o { ood.push(s) } else { id.push(s) }
    }
    if id.is_empty() || ood.is_empty() {
        return Err(invalid("detection metrics need both ID and OOD nodes"));
    }
    Ok((id, ood))
}

/// Probability that a random OOD node outscores a random ID node, ties
/// counted as one half.
pub fn auroc(scores: &[f64], is_ood: &[bool]) -> Result<f64> {
    let (mut id, ood) = split_scores(scores, is_ood)?;
    id.sort_by(f64::total_cmp);
    // twice the Mann-Whitney count, kept integral
    let mut twice: u128 = 0;
    for &s in &ood {
        let below = id.partition_point(|&x| x < s);
        let not_above = id.partition_point(|&x| x <= s);
        twice += (2 * below + (not_above - below)) as u128;
    }
    Ok(twice as f64 / (2 * id.len() as u128 * ood.len() as u128) as f64)
}

/// False-positive rate at the largest threshold `t` for which at least 95%
/// of OOD nodes have `score ≥ t`.
pub fn fpr_at_95(scores: &[f64], is_ood: &[bool]) -> Result<f64> {
    let (id, mut ood) = split_scores(scores, is_ood)?;
    ood.sort_by(|a, b| b.total_cmp(a));
    let need = (95 * ood.len()).div_ceil(100);
    let t = ood[need - 1];
    Ok(id.iter().filter(|&&s| s >= t).count() as f64 / id.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionMetrics {
    pub auroc: f64,
    pub fpr_at_95: f64,
}

pub fn detection_metrics(scores: &[f64], is_ood: &[bool]) -> Result<DetectionMetrics> {
    Ok(DetectionMetrics { auroc: auroc(scores, is_ood)?, fpr_at_95: fpr_at_95(scores, is_ood)? })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub auroc: f64,
    pub fpr_at_95: f64,
    /// Score used for `auroc` and `fpr_at_95`.
    pub score_kind: ScoreKind,
    /// Detection metrics under the other score.
    pub alternate: DetectionMetrics,
    /// One row per class, unknown class last.
    pub per_class: Vec<ClassRow>,
    pub n_test: usize,
    pub n_ood: usize,
}

/// Full report on the test nodes. `ood_scores` and `p_unknown` are
/// per-node; `truth` uses the unknown class index `num_classes − 1`.
pub fn eval_report(
    pred: &[usize],
    truth: &[usize],
    test_mask: &[bool],
    ood_scores: &[f64],
    p_unknown: &[f64],
    num_classes: usize,
    score_kind: ScoreKind,
) -> Result<EvalReport> {
    let (accuracy, macro_f1) = accuracy_macro_f1(pred, truth, test_mask, num_classes)?;
    let test: Vec<usize> = (0..test_mask.len()).filter(|&i| test_mask[i]).collect();
    let unknown = num_classes - 1;
    let is_ood: Vec<bool> = test.iter().map(|&i| truth[i] == unknown).collect();
    let pick = |v: &[f64]| test.iter().map(|&i| v[i]).collect::<Vec<_>>();
    let a = detection_metrics(&pick(ood_scores), &is_ood)?;
    let b = detection_metrics(&pick(p_unknown), &is_ood)?;
    let (main, alternate) = match score_kind {
        ScoreKind::OodScore => (a, b),
        ScoreKind::PUnknown => (b, a),
    };
    let tp: Vec<usize> = test.iter().map(|&i| pred[i]).collect();
    let tt: Vec<usize> = test.iter().map(|&i| truth[i]).collect();
    Ok(EvalReport {
        accuracy,
        macro_f1,
        auroc: main.auroc,
        fpr_at_95: main.fpr_at_95,
        score_kind,
        alternate,
        per_class: per_class(&tp, &tt, num_classes)?,
        n_test: test.len(),
        n_ood: is_ood.iter().filter(|&&o| o).count(),
    })
}
