//! Mixup of candidate nodes with labeled ID nodes.
//!
//! * Positive Mixup (ID candidates): `h = λ h_c + (1−λ) h_l`,
//!   `y = λ ȳ_c + (1−λ) y_l`, trained with soft cross-entropy.
//! * Negative Mixup (OOD candidates): `h = λ h_c − (1−λ) h_l`,
//!   `y = λ e_unk − (1−λ) e_{y_l}`, trained with a positive learning loss on
//!   the unknown class and a negative learning loss on the partner's class.
//! * Conventional positive Mixup for OOD candidates is kept as a baseline.

use std::sync::Arc;

use rand::RngExt;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::encoder::{classify_on_tape, ClassifierParams, ClassifierVars, PROB_FLOOR};
use crate::error::{invalid, Result};
use crate::rng::Pcg64;
use crate::tensor::Matrix;

/// Sign applied to the labeled partner's embedding and label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum MixSign {
    Positive,
    Negative,
}

impl MixSign {
    fn factor(self) -> f64 {
        match self {
            MixSign::Positive => 1.0,
            MixSign::Negative => -1.0,
        }
    }
}

/// One mixed training sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixupSample {
    pub embedding: Vec<f64>,
    /// Soft label over `C+1` classes; negative entries only for negative Mixup.
    pub label: Vec<f64>,
    pub lambda: f64,
    pub candidate: usize,
    pub partner: usize,
    /// Class of the labeled partner.
    pub partner_class: usize,
}

fn check_lambda(lambda: f64) -> Result<()> {
    if (0.0..=1.0).contains(&lambda) {
        Ok(())
    } else {
        Err(invalid(format!("lambda {lambda} outside [0, 1]")))
    }
}

fn one_hot(k: usize, n: usize) -> Vec<f64> {
    let mut v = vec![0.0; n];
    v[k] = 1.0;
    v
}

fn mix(
    candidate: usize,
    partner: usize,
    embeddings: &Matrix,
    candidate_class: usize,
    partner_class: usize,
    num_outputs: usize,
    lambda: f64,
    sign: MixSign,
) -> Result<MixupSample> {
    check_lambda(lambda)?;
    if candidate_class >= num_outputs || partner_class >= num_outputs {
        return Err(invalid("label outside the output range"));
    }
    let s = sign.factor();
    let hc = embeddings.row(candidate);
    let hl = embeddings.row(partner);
    let embedding = hc.iter().zip(hl).map(|(a, b)| lambda * a + s * (1.0 - lambda) * b).collect();
    let yc = one_hot(candidate_class, num_outputs);
    let yl = one_hot(partner_class, num_outputs);
    let label = yc.iter().zip(&yl).map(|(a, b)| lambda * a + s * (1.0 - lambda) * b).collect();
    Ok(MixupSample { embedding, label, lambda, candidate, partner, partner_class })
}

/// Positive Mixup of an ID candidate (pseudo-label `pseudo_class`) with a
/// labeled node of class `partner_class`.
pub fn positive_mixup_id(
    candidate: usize,
    partner: usize,
    embeddings: &Matrix,
    pseudo_class: usize,
    partner_class: usize,
    num_outputs: usize,
    lambda: f64,
) -> Result<MixupSample> {
    mix(candidate, partner, embeddings, pseudo_class, partner_class, num_outputs, lambda, MixSign::Positive)
}

/// Negative Mixup of an OOD candidate with a labeled node.
pub fn negative_mixup_ood(
    candidate: usize,
    partner: usize,
    embeddings: &Matrix,
    partner_class: usize,
    num_outputs: usize,
    lambda: f64,
) -> Result<MixupSample> {
    mix(candidate, partner, embeddings, num_outputs - 1, partner_class, num_outputs, lambda, MixSign::Negative)
}

/// Conventional positive Mixup of an OOD candidate with a labeled node.
pub fn conventional_mixup_ood(
    candidate: usize,
    partner: usize,
    embeddings: &Matrix,
    partner_class: usize,
    num_outputs: usize,
    lambda: f64,
) -> Result<MixupSample> {
    mix(candidate, partner, embeddings, num_outputs - 1, partner_class, num_outputs, lambda, MixSign::Positive)
}

/// Draws mixing coefficients from `Beta(α, α)`.
#[derive(Debug, Clone, Copy)]
pub struct LambdaSampler {
    beta: Beta<f64>,
}

impl LambdaSampler {
    pub fn new(alpha: f64) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(invalid(format!("beta alpha must be positive, got {alpha}")));
        }
        Ok(Self { beta: Beta::new(alpha, alpha).map_err(|e| invalid(e.to_string()))? })
    }

    pub fn sample(&self, rng: &mut Pcg64) -> f64 {
        self.beta.sample(rng).clamp(0.0, 1.0)
    }
}

/// `n` labeled partners drawn uniformly with replacement.
pub fn sample_partners(rng: &mut Pcg64, labeled: &[usize], n: usize) -> Vec<usize> {
    (0..n).map(|_| labeled[rng.random_range(0..labeled.len())]).collect()
}

// ----------------------------------------------------------------------
// tape forms
// ----------------------------------------------------------------------

/// Mixed embeddings `λ_r h[cand_r] ± (1−λ_r) h[partner_r]`, one row per pair.
pub fn mix_on_tape(
    tape: &mut Tape,
    h: Var,
    candidates: &[usize],
    partners: &[usize],
    lambdas: &[f64],
    sign: MixSign,
) -> Result<Var> {
    if candidates.len() != partners.len() || candidates.len() != lambdas.len() {
        return Err(invalid("mixup batch arrays differ in length"));
    }
    lambdas.iter().try_for_each(|&l| check_lambda(l))?;
    let hc = tape.gather_rows(h, Arc::from(candidates))?;
    let hl = tape.gather_rows(h, Arc::from(partners))?;
    let lam = tape.constant(Matrix::column(lambdas.to_vec()));
    let rest = tape.constant(Matrix::column(lambdas.iter().map(|l| sign.factor() * (1.0 - l)).collect()));
    let a = tape.mul(hc, lam)?;
    let b = tape.mul(hl, rest)?;
    tape.add(a, b)
}

fn log_clamped(tape: &mut Tape, p: Var) -> Result<Var> {
    let c = tape.clamp(p, PROB_FLOOR, 1.0 - PROB_FLOOR);
    tape.log(c)
}

/// `−(1/n) Σ_r Σ_k y_rk log p_rk`.
pub fn soft_cross_entropy_on_tape(tape: &mut Tape, probs: Var, targets: &Matrix) -> Result<Var> {
    let n = targets.rows();
    if n == 0 {
        return Err(invalid("soft cross entropy over no samples"));
    }
    let lp = log_clamped(tape, probs)?;
    let y = tape.constant(targets.clone());
    let t = tape.mul(lp, y)?;
    let s = tape.sum_scalar(t);
    Ok(tape.scale(s, -1.0 / n as f64))
}

/// `−(1/n) Σ_r w_r log p_{r, k_r}`.
fn weighted_nll(tape: &mut Tape, probs: Var, classes: &[usize], weights: &[f64]) -> Result<Var> {
    let n = classes.len();
    if n == 0 {
        return Err(invalid("loss over no samples"));
    }
    let p = tape.pick(probs, classes.iter().enumerate().map(|(r, &k)| (r, k)).collect())?;
    let lp = log_clamped(tape, p)?;
    let w = tape.constant(Matrix::column(weights.to_vec()));
    let t = tape.mul(lp, w)?;
    let s = tape.sum_scalar(t);
    Ok(tape.scale(s, -1.0 / n as f64))
}

/// Positive learning: `−(1/n) Σ λ_r log p_{r,unk}`.
pub fn positive_learning_on_tape(tape: &mut Tape, probs: Var, lambdas: &[f64]) -> Result<Var> {
    let unk = tape.shape(probs).1 - 1;
    weighted_nll(tape, probs, &vec![unk; lambdas.len()], lambdas)
}

/// Negative learning: `−(1/n) Σ (1−λ_r) log(1 − p_{r, y_r})`.
pub fn negative_learning_on_tape(tape: &mut Tape, probs: Var, lambdas: &[f64], partner_classes: &[usize]) -> Result<Var> {
    let n = lambdas.len();
    if n == 0 || partner_classes.len() != n {
        return Err(invalid("negative learning needs one class per sample"));
    }
    let p = tape.pick(probs, partner_classes.iter().enumerate().map(|(r, &k)| (r, k)).collect())?;
    if tape.value(p).as_slice().iter().any(|&v| v > 1.0 - PROB_FLOOR) {
        log::debug!("negative learning probability clamped below 1");
    }
    let pc = tape.clamp(p, PROB_FLOOR, 1.0 - PROB_FLOOR);
    let q = tape.neg(pc);
    let q = tape.add_scalar(q, 1.0);
    let lq = tape.log(q)?;
    let w = tape.constant(Matrix::column(lambdas.iter().map(|l| 1.0 - l).collect()));
    let t = tape.mul(lq, w)?;
    let s = tape.sum_scalar(t);
    Ok(tape.scale(s, -1.0 / n as f64))
}

/// Conventional OOD Mixup loss: `−(1/n) Σ (λ log p_unk + (1−λ) log p_{y})`.
pub fn conventional_ood_on_tape(tape: &mut Tape, probs: Var, lambdas: &[f64], partner_classes: &[usize]) -> Result<Var> {
    let a = positive_learning_on_tape(tape, probs, lambdas)?;
    let rest: Vec<f64> = lambdas.iter().map(|l| 1.0 - l).collect();
    let b = weighted_nll(tape, probs, partner_classes, &rest)?;
    tape.add(a, b)
}

// ----------------------------------------------------------------------
// plain-value forms
// ----------------------------------------------------------------------

fn classify_samples(tape: &mut Tape, samples: &[MixupSample], cls: &ClassifierParams) -> Result<Var> {
    let rows: Vec<&[f64]> = samples.iter().map(|s| s.embedding.as_slice()).collect();
    let h = tape.constant(Matrix::from_rows(&rows)?);
    let w = tape.constant(cls.weight.clone());
    let b = cls.bias.as_ref().map(|b| tape.constant(b.clone()));
    Ok(classify_on_tape(tape, h, &ClassifierVars { weight: w, bias: b })?.1)
}

fn eval_samples(
    samples: &[MixupSample],
    cls: &ClassifierParams,
    f: impl FnOnce(&mut Tape, Var) -> Result<Var>,
) -> Result<Option<f64>> {
    if samples.is_empty() {
        return Ok(None);
    }
    let mut tape = Tape::new();
    let p = classify_samples(&mut tape, samples, cls)?;
    let l = f(&mut tape, p)?;
    Ok(Some(tape.value(l).item()))
}

/// Soft cross-entropy of ID Mixup samples; `None` for an empty batch.
pub fn mixup_id_loss(samples: &[MixupSample], cls: &ClassifierParams) -> Result<Option<f64>> {
    let rows: Vec<&[f64]> = samples.iter().map(|s| s.label.as_slice()).collect();
    eval_samples(samples, cls, |t, p| soft_cross_entropy_on_tape(t, p, &Matrix::from_rows(&rows)?))
}

pub fn positive_learning_loss(samples: &[MixupSample], cls: &ClassifierParams) -> Result<Option<f64>> {
    let l: Vec<f64> = samples.iter().map(|s| s.lambda).collect();
    eval_samples(samples, cls, |t, p| positive_learning_on_tape(t, p, &l))
}

pub fn negative_learning_loss(samples: &[MixupSample], cls: &ClassifierParams) -> Result<Option<f64>> {
    let l: Vec<f64> = samples.iter().map(|s| s.lambda).collect();
    let y: Vec<usize> = samples.iter().map(|s| s.partner_class).collect();
    eval_samples(samples, cls, |t, p| negative_learning_on_tape(t, p, &l, &y))
}

pub fn conventional_ood_loss(samples: &[MixupSample], cls: &ClassifierParams) -> Result<Option<f64>> {
    let l: Vec<f64> = samples.iter().map(|s| s.lambda).collect();
    let y: Vec<usize> = samples.iter().map(|s| s.partner_class).collect();
    eval_samples(samples, cls, |t, p| conventional_ood_on_tape(t, p, &l, &y))
}
