//! Numerical checks of how Mixup losses move the predictions of the two
//! constituent nodes.
//!
//! The classifier is taken as bias-free and linear, so mixing embeddings
//! mixes logits: `š = λ s_i ± (1−λ) s_j`, `p̌ = softmax(š)`. One gradient
//! step of size `ε` on `(s_i, s_j)` is taken for a single loss term and the
//! resulting change of `p_i = softmax(s_i)` and `p_j = softmax(s_j)` is
//! compared against the expected signs.
//!
//! Node `i` is a potential-OOD node, node `j` a labeled ID node of class
//! `y_j`; the unknown class is the last index.

use rand::RngExt;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{softmax_in_place, Tape};
use crate::error::{invalid, Result};
use crate::mixup::MixSign;
use crate::rng::Pcg64;
use crate::tensor::Matrix;

/// Probabilities must stay inside `[PROB_MARGIN, 1 − PROB_MARGIN]`.
pub const PROB_MARGIN: f64 = 1e-6;
/// Smallest magnitude counted as a strict sign.
pub const MIN_MAGNITUDE: f64 = 1e-14;
pub const DEFAULT_EPSILON: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TheoremInstance {
    pub s_i: Vec<f64>,
    pub s_j: Vec<f64>,
    /// Class of the labeled node, a known class.
    pub y_j: usize,
    pub lambda: f64,
    pub epsilon: f64,
}

fn softmax(s: &[f64]) -> Vec<f64> {
    let mut p = s.to_vec();
    softmax_in_place(&mut p);
    p
}

fn in_margin(p: &[f64]) -> bool {
    p.iter().all(|&v| (PROB_MARGIN..=1.0 - PROB_MARGIN).contains(&v))
}

impl TheoremInstance {
    pub fn num_outputs(&self) -> usize {
        self.s_i.len()
    }

    pub fn unknown(&self) -> usize {
        self.num_outputs() - 1
    }

    pub fn p_i(&self) -> Vec<f64> {
        softmax(&self.s_i)
    }

    pub fn p_j(&self) -> Vec<f64> {
        softmax(&self.s_j)
    }

    /// `softmax(λ s_i ± (1−λ) s_j)`.
    pub fn p_mixed(&self, sign: MixSign) -> Vec<f64> {
        let f = match sign {
            MixSign::Positive => 1.0 - self.lambda,
            MixSign::Negative => -(1.0 - self.lambda),
        };
        let s: Vec<f64> = self.s_i.iter().zip(&self.s_j).map(|(a, b)| self.lambda * a + f * b).collect();
        softmax(&s)
    }

    /// Shape checks, plus the probability margin when `strict`.
    pub fn validate(&self, strict: bool) -> Result<()> {
        let n = self.num_outputs();
        if n < 3 || self.s_j.len() != n {
            return Err(invalid("instances need two logit vectors of equal length ≥ 3"));
        }
        if self.y_j >= n - 1 {
            return Err(invalid("labeled class must be a known class"));
        }
        if !(0.0..=1.0).contains(&self.lambda) || !(self.epsilon > 0.0) {
            return Err(invalid("need lambda in [0, 1] and a positive step"));
        }
        if strict {
            if !(self.lambda > 0.0 && self.lambda < 1.0) {
                return Err(invalid("lambda must lie strictly inside (0, 1)"));
            }
            let all = [self.p_i(), self.p_j(), self.p_mixed(MixSign::Positive), self.p_mixed(MixSign::Negative)];
            if !all.iter().all(|p| in_margin(p)) {
                return Err(invalid("a probability falls outside the margin"));
            }
        }
        Ok(())
    }

    /// Random instance: standard-normal logits scaled by 1.5, `λ ~ U[0.1, 0.9]`.
    /// Instances outside the probability margin are re-drawn.
    pub fn sample(rng: &mut Pcg64, num_outputs: usize, epsilon: f64) -> Result<Self> {
        if num_outputs < 3 {
            return Err(invalid("need at least three classes"));
        }
        let normal = Normal::new(0.0, 1.5).map_err(|e| invalid(e.to_string()))?;
        loop {
            let inst = Self {
                s_i: (0..num_outputs).map(|_| normal.sample(rng)).collect(),
                s_j: (0..num_outputs).map(|_| normal.sample(rng)).collect(),
                y_j: rng.random_range(0..num_outputs - 1),
                lambda: rng.random_range(0.1..0.9),
                epsilon,
            };
            if inst.validate(true).is_ok() {
                return Ok(inst);
            }
        }
    }

    /// The same pair seen from the other side: roles of `i` and `j`
    /// swapped and `λ ↦ 1 − λ`.
    pub fn mirrored(&self) -> Self {
        Self { s_i: self.s_j.clone(), s_j: self.s_i.clone(), lambda: 1.0 - self.lambda, ..self.clone() }
    }
}

/// The single loss term a step is taken on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepLoss {
    /// `−λ log p̌_unk`
    Unknown,
    /// `−(1−λ) log p̌_{y_j}`
    Known,
    /// `−(1−λ) log(1 − p̌_{y_j})`
    NotKnown,
}

/// Changes of `p_i` and `p_j` after one step on `loss`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDeltas {
    pub dp_i: Vec<f64>,
    pub dp_j: Vec<f64>,
}

pub fn step_deltas(inst: &TheoremInstance, sign: MixSign, loss: StepLoss) -> Result<StepDeltas> {
    inst.validate(false)?;
    let lam = inst.lambda;
    let mut tape = Tape::new();
    let si = tape.param(Matrix::row_vector(inst.s_i.clone()));
    let sj = tape.param(Matrix::row_vector(inst.s_j.clone()));
    let a = tape.scale(si, lam);
    let f = match sign {
        MixSign::Positive => 1.0 - lam,
        MixSign::Negative => -(1.0 - lam),
    };
    let b = tape.scale(sj, f);
    let s = tape.add(a, b)?;
    let p = tape.row_softmax(s);
    let (class, weight) = match loss {
        StepLoss::Unknown => (inst.unknown(), lam),
        StepLoss::Known | StepLoss::NotKnown => (inst.y_j, 1.0 - lam),
    };
    let pt = tape.pick(p, vec![(0, class)])?;
    let arg = match loss {
        StepLoss::NotKnown => {
            let q = tape.neg(pt);
            tape.add_scalar(q, 1.0)
        }
        _ => pt,
    };
    let l = tape.log(arg)?;
    let l = tape.scale(l, -weight);
    tape.backward(l)?;

    let moved = |orig: &[f64], g: &Matrix| {
        let s: Vec<f64> = orig.iter().zip(g.as_slice()).map(|(x, d)| x - inst.epsilon * d).collect();
        let (after, before) = (softmax(&s), softmax(orig));
        after.iter().zip(&before).map(|(a, b)| a - b).collect::<Vec<f64>>()
    };
    let gi = tape.grad(si).expect("tracked").clone();
    let gj = tape.grad(sj).expect("tracked").clone();
    Ok(StepDeltas { dp_i: moved(&inst.s_i, &gi), dp_j: moved(&inst.s_j, &gj) })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Sign {
    Positive,
    Negative,
}

impl Sign {
    fn holds(self, v: f64) -> bool {
        match self {
            Sign::Positive => v > MIN_MAGNITUDE,
            Sign::Negative => v < -MIN_MAGNITUDE,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SignCheck {
    pub quantity: String,
    pub value: f64,
    pub expected: Sign,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SignReport {
    pub checks: Vec<SignCheck>,
}

impl SignReport {
    fn push(&mut self, quantity: &str, value: f64, expected: Sign) {
        let pass = expected.holds(value);
        self.checks.push(SignCheck { quantity: quantity.to_string(), value, expected, pass });
    }

    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.pass)
    }

    pub fn failures(&self) -> impl Iterator<Item = &SignCheck> {
        self.checks.iter().filter(|c| !c.pass)
    }
}

/// Conventional positive Mixup: both unknown-class probabilities and both
/// `y_j` probabilities rise.
pub fn theorem1_step_test(inst: &TheoremInstance) -> Result<SignReport> {
    inst.validate(true)?;
    let (u, y) = (inst.unknown(), inst.y_j);
    let a = step_deltas(inst, MixSign::Positive, StepLoss::Unknown)?;
    let b = step_deltas(inst, MixSign::Positive, StepLoss::Known)?;
    let mut r = SignReport::default();
    r.push("unknown loss: dp_i[unk]", a.dp_i[u], Sign::Positive);
    r.push("unknown loss: dp_j[unk]", a.dp_j[u], Sign::Positive);
    r.push("known loss: dp_i[y_j]", b.dp_i[y], Sign::Positive);
    r.push("known loss: dp_j[y_j]", b.dp_j[y], Sign::Positive);
    Ok(r)
}

/// Negative Mixup: positive learning raises `p_i[unk]` and lowers
/// `p_j[unk]`; negative learning lowers `p_i[y_j]` and raises `p_j[y_j]`.
pub fn theorem2_step_test(inst: &TheoremInstance) -> Result<SignReport> {
    inst.validate(true)?;
    let (u, y) = (inst.unknown(), inst.y_j);
    let a = step_deltas(inst, MixSign::Negative, StepLoss::Unknown)?;
    let b = step_deltas(inst, MixSign::Negative, StepLoss::NotKnown)?;
    let mut r = SignReport::default();
    r.push("positive learning: dp_i[unk]", a.dp_i[u], Sign::Positive);
    r.push("positive learning: dp_j[unk]", a.dp_j[u], Sign::Negative);
    r.push("negative learning: dp_i[y_j]", b.dp_i[y], Sign::Negative);
    r.push("negative learning: dp_j[y_j]", b.dp_j[y], Sign::Positive);
    Ok(r)
}

/// `Σ_{k≠t} p̌_k / p_k + (1 − p̌_t)/(1 − p_t)`.
fn ratio_sum(mixed: &[f64], p: &[f64], t: usize) -> f64 {
    (0..p.len()).map(|k| if k == t { (1.0 - mixed[t]) / (1.0 - p[t]) } else { mixed[k] / p[k] }).sum()
}

/// The closed-form derivatives of each loss term with respect to the
/// constituent probabilities, with their expected signs. `E*` use positive
/// mixing, `F*` negative mixing.
pub fn closed_form_sign_eval(inst: &TheoremInstance) -> Result<SignReport> {
    inst.validate(true)?;
    let (lam, u, y) = (inst.lambda, inst.unknown(), inst.y_j);
    let (pi, pj) = (inst.p_i(), inst.p_j());
    let mut r = SignReport::default();

    let m = inst.p_mixed(MixSign::Positive);
    r.push("E1", -lam * lam / pi[u] * ratio_sum(&m, &pi, u), Sign::Negative);
    r.push("E2", lam * (lam - 1.0) / pj[u] * ratio_sum(&m, &pj, u), Sign::Negative);
    r.push("E3", -(1.0 - lam).powi(2) / pj[y] * ratio_sum(&m, &pj, y), Sign::Negative);
    r.push("E4", lam * (lam - 1.0) / pi[y] * ratio_sum(&m, &pi, y), Sign::Negative);

    let m = inst.p_mixed(MixSign::Negative);
    let odds = m[y] / (1.0 - m[y]);
    r.push("F1", -lam * lam / pi[u] * ratio_sum(&m, &pi, u), Sign::Negative);
    r.push("F2", lam * (1.0 - lam) / pj[u] * ratio_sum(&m, &pj, u), Sign::Positive);
    r.push("F3", -(1.0 - lam).powi(2) * odds / pj[y] * ratio_sum(&m, &pj, y), Sign::Negative);
    r.push("F4", (1.0 - lam) * lam * odds / pi[y] * ratio_sum(&m, &pi, y), Sign::Positive);
    Ok(r)
}

/// Pass counts over a batch of random instances.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SuiteSummary {
    pub instances: usize,
    pub theorem1_failures: usize,
    pub theorem2_failures: usize,
    pub closed_form_failures: usize,
    /// Instances whose halved step did not roughly halve every delta.
    pub halving_failures: usize,
}

impl SuiteSummary {
    pub fn passed(&self) -> bool {
        self.theorem1_failures == 0 && self.theorem2_failures == 0 && self.closed_form_failures == 0 && self.halving_failures == 0
    }
}

/// Ratio `|Δ(ε/2)| / |Δ(ε)|` of the largest-magnitude tracked quantity of
/// every step used by the two theorems; each should be close to 1/2.
pub fn halving_ratios(inst: &TheoremInstance) -> Result<Vec<f64>> {
    let half = TheoremInstance { epsilon: inst.epsilon / 2.0, ..inst.clone() };
    let (u, y) = (inst.unknown(), inst.y_j);
    let steps = [
        (MixSign::Positive, StepLoss::Unknown, u),
        (MixSign::Positive, StepLoss::Known, y),
        (MixSign::Negative, StepLoss::Unknown, u),
        (MixSign::Negative, StepLoss::NotKnown, y),
    ];
    let mut out = Vec::new();
    for (sign, loss, k) in steps {
        let full = step_deltas(inst, sign, loss)?;
        let part = step_deltas(&half, sign, loss)?;
        out.push(part.dp_i[k].abs() / full.dp_i[k].abs());
        out.push(part.dp_j[k].abs() / full.dp_j[k].abs());
    }
    Ok(out)
}

/// Run `per_size` random instances for each class count in `sizes`.
pub fn run_suite(rng: &mut Pcg64, sizes: &[usize], per_size: usize, epsilon: f64) -> Result<SuiteSummary> {
    let mut s = SuiteSummary::default();
    for &n in sizes {
        for _ in 0..per_size {
            let inst = TheoremInstance::sample(rng, n, epsilon)?;
            s.instances += 1;
            s.theorem1_failures += usize::from(!theorem1_step_test(&inst)?.passed());
            s.theorem2_failures += usize::from(!theorem2_step_test(&inst)?.passed());
            s.closed_form_failures += usize::from(!closed_form_sign_eval(&inst)?.passed());
            let ok = halving_ratios(&inst)?.iter().all(|r| (0.45..=0.55).contains(r));
            s.halving_failures += usize::from(!ok);
        }
    }
    Ok(s)
}
