//! Helpers shared by the integration tests.
#![allow(dead_code)]

use negmix::autodiff::{Tape, Var};
use negmix::tensor::Matrix;
use negmix::Result;
use rand::RngExt;
use rand_pcg::Pcg64;

pub const STEP: f64 = 1e-3;
pub const MAX_REL_ERR: f64 = 1e-5;

pub fn random_matrix(rng: &mut Pcg64, rows: usize, cols: usize, scale: f64) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(-scale..scale)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

pub fn positive_matrix(rng: &mut Pcg64, rows: usize, cols: usize) -> Matrix {
    let data = (0..rows * cols).map(|_| rng.random_range(0.5..2.0)).collect();
    Matrix::from_vec(rows, cols, data).unwrap()
}

/// Evaluate `f` on fresh parameters built from `inputs`.
fn eval(inputs: &[Matrix], f: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.param(m.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    tape.value(out).item()
}

/// Worst relative error between tape gradients and central differences over
/// every input entry; see [`RelErr`].
pub fn grad_check(inputs: &[Matrix], f: impl Fn(&mut Tape, &[Var]) -> Result<Var>) -> f64 {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|m| tape.param(m.clone())).collect();
    let out = f(&mut tape, &vars).unwrap();
    assert_eq!(tape.shape(out), (1, 1), "objective must be a scalar");
    tape.backward(out).unwrap();
    let mut err = RelErr::default();
    for (k, (&v, m)) in vars.iter().zip(inputs).enumerate() {
        let zeros = Matrix::zeros(m.rows(), m.cols());
        let analytic = tape.grad(v).unwrap_or(&zeros);
        for idx in 0..m.as_slice().len() {
            let at = |h: f64| {
                let mut x = inputs.to_vec();
                x[k].as_mut_slice()[idx] += h;
                eval(&x, &f)
            };
            // a kink that no step clears is a failure here: ops are smooth almost everywhere
            err.push(analytic.as_slice()[idx], central_difference(at).unwrap_or(f64::NAN));
        }
    }
    err.worst
}

/// Fourth-order central difference of `at` around 0, starting from [`STEP`].
///
/// A stencil that straddles a kink or a jump gives an estimate that moves with
/// the step, while on a smooth stretch the estimates at `h` and `h/10` agree
/// to round-off. So the step shrinks by decades until two consecutive
/// estimates agree; `None` if they never do (the point sits on the kink
/// itself). A wrong analytic gradient cannot hide behind this: the numeric
/// value it is compared against is the same at every step.
pub fn central_difference(at: impl Fn(f64) -> f64) -> Option<f64> {
    let est = |h: f64| (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
    let mut h = STEP;
    let mut d = est(h);
    while h > 1e-7 {
        let finer = est(h / 10.0);
        if (d - finer).abs() <= 1e-9 * d.abs().max(1.0) {
            return Some(d);
        }
        h /= 10.0;
        d = finer;
    }
    None
}

/// Below this both derivatives are indistinguishable from the round-off of
/// a finite difference on an O(1) objective.
pub const NOISE_FLOOR: f64 = 1e-9;

/// Running maximum of `|g − ĝ| / max(|g|, 1e-8)`. Coordinates where both
/// values are under [`NOISE_FLOOR`] (exactly-zero gradients whose finite
/// difference picks up one ulp) count as agreeing.
#[derive(Debug, Default)]
pub struct RelErr {
    pub worst: f64,
}

impl RelErr {
    pub fn push(&mut self, analytic: f64, numeric: f64) {
        if analytic.abs() < NOISE_FLOOR && numeric.abs() < NOISE_FLOOR {
            return;
        }
        let e = (analytic - numeric).abs() / analytic.abs().max(1e-8);
        // NaN must fail, so no plain max
        self.worst = if e.is_nan() || e > self.worst { e } else { self.worst };
    }
}

/// A scalar that depends on every entry of `v` with distinct weights, so a
/// wrong gradient cannot hide behind a symmetric reduction.
pub fn weighted_sum(tape: &mut Tape, v: Var, salt: u64) -> Result<Var> {
    let (r, c) = tape.shape(v);
    // in [0.5, 1.5): never zero, so no entry's gradient vanishes by construction
    let data = (0..r * c).map(|i| 0.5 + ((i as u64 * 7919 + salt) % 13) as f64 / 13.0).collect();
    let w = tape.constant(Matrix::from_vec(r, c, data)?);
    let t = tape.mul(v, w)?;
    Ok(tape.sum_scalar(t))
}
pub mod cases;
pub mod oracles;
