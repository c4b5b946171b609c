//! Cross-layer prototype contrastive learning.
//!
//! Prototypes are per-layer class means of node embeddings. The
//! prototype-to-prototype loss pulls same-class prototypes of two layers
//! together; the node-to-prototype loss pulls each node towards its class
//! prototypes at both layers. Both are NT-Xent losses over cosine
//! similarities with temperature `τ`.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Result};
use crate::tensor::Matrix;

/// Divisor applied to the sum over (pivot, other) layer pairs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum PairNorm {
    /// Divide by the number of layers `L`.
    #[default]
    #[serde(rename = "L")]
    Layers,
    /// Divide by the number of pairs `L − 1`.
    #[serde(rename = "L-1")]
    Pairs,
}

impl PairNorm {
    fn factor(self, layers: usize) -> f64 {
        match self {
            PairNorm::Layers => 1.0 / layers as f64,
            PairNorm::Pairs => 1.0 / (layers - 1) as f64,
        }
    }
}

/// Prototypes of the classes that have at least one member, on the tape.
#[derive(Debug, Clone)]
pub struct PrototypeVars {
    /// One `m × d` matrix per layer; row `r` belongs to class `present[r]`.
    pub layers: Vec<Var>,
    /// Present class ids, ascending.
    pub present: Vec<usize>,
    /// Class id → row in `layers`, `None` when absent.
    pub row_of: Vec<Option<usize>>,
}

/// Per-layer, per-class means of `layers` under `labels` (classes
/// `0..num_classes`). Label assignment is a constant; gradients flow through
/// the means.
pub fn prototypes_on_tape(tape: &mut Tape, layers: &[Var], labels: &[usize], num_classes: usize) -> Result<PrototypeVars> {
    if layers.is_empty() {
        return Err(invalid("no layers given"));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= num_classes) {
        return Err(invalid(format!("label {bad} outside {num_classes} classes")));
    }
    for &l in layers {
        if tape.shape(l).0 != labels.len() {
            return Err(invalid("embedding rows do not match label count"));
        }
    }
    let mut row_of = vec![None; num_classes];
    let mut present = Vec::new();
    let mut counts = vec![0usize; num_classes];
    for &y in labels {
        counts[y] += 1;
    }
    for k in 0..num_classes {
        if counts[k] > 0 {
            row_of[k] = Some(present.len());
            present.push(k);
        }
    }
    let mut order: Vec<usize> = (0..labels.len()).collect();
    order.sort_by_key(|&i| (labels[i], i));
    let ids: Arc<[usize]> = order.iter().map(|&i| row_of[labels[i]].unwrap()).collect();
    let order: Arc<[usize]> = order.into();

    let mut out = Vec::with_capacity(layers.len());
    for &l in layers {
        let g = tape.gather_rows(l, order.clone())?;
        out.push(tape.segment_mean(g, ids.clone(), present.len())?);
    }
    Ok(PrototypeVars { layers: out, present, row_of })
}

fn masked_exp_rowsum(tape: &mut Tape, s: Var, drop_diagonal: bool) -> Result<Var> {
    let e = tape.exp(s);
    let e = if drop_diagonal {
        let (r, c) = tape.shape(s);
        let mut m = Matrix::filled(r, c, 1.0);
        for i in 0..r.min(c) {
            m.set(i, i, 0.0);
        }
        let m = tape.constant(m);
        tape.mul(e, m)?
    } else {
        e
    };
    Ok(tape.sum_rows(e))
}

fn diagonal(tape: &mut Tape, s: Var) -> Result<Var> {
    let n = tape.shape(s).0;
    tape.pick(s, (0..n).map(|i| (i, i)).collect())
}

/// Sum over anchors of layer `a` against layer `b`:
/// `−log e^{s(a_k,b_k)} / (Σ_i e^{s(a_k,b_i)} + Σ_{i≠k} e^{s(a_k,a_i)})`.
fn p2p_directed_sum(tape: &mut Tape, a: Var, b: Var, tau: f64) -> Result<Var> {
    let bt = tape.transpose(b);
    let at = tape.transpose(a);
    let sab = tape.matmul(a, bt)?;
    let sab = tape.scale(sab, 1.0 / tau);
    let saa = tape.matmul(a, at)?;
    let saa = tape.scale(saa, 1.0 / tau);
    let cross = masked_exp_rowsum(tape, sab, false)?;
    let within = masked_exp_rowsum(tape, saa, true)?;
    let den = tape.add(cross, within)?;
    let log_den = tape.log(den)?;
    let pos = diagonal(tape, sab)?;
    let per_anchor = tape.sub(log_den, pos)?;
    Ok(tape.sum_scalar(per_anchor))
}

/// Symmetrized prototype loss between two layers, averaged over the
/// `2·m` anchors (`m` present classes). `None` with fewer than 2 classes.
pub fn p2p_pair_on_tape(tape: &mut Tape, protos: &PrototypeVars, p: usize, q: usize, tau: f64) -> Result<Option<Var>> {
    check_tau(tau)?;
    let m = protos.present.len();
    if m < 2 {
        return Ok(None);
    }
    let a = tape.normalize_rows(protos.layers[p]);
    let b = tape.normalize_rows(protos.layers[q]);
    let x = p2p_directed_sum(tape, a, b, tau)?;
    let y = p2p_directed_sum(tape, b, a, tau)?;
    let s = tape.add(x, y)?;
    Ok(Some(tape.scale(s, 1.0 / (2 * m) as f64)))
}

fn check_tau(tau: f64) -> Result<()> {
    if tau > 0.0 && tau.is_finite() {
        Ok(())
    } else {
        Err(invalid(format!("temperature must be positive, got {tau}")))
    }
}

fn check_layers(n: usize, pivot: usize) -> Result<()> {
    if n < 2 {
        return Err(invalid("contrastive losses need at least two layers"));
    }
    if pivot >= n {
        return Err(invalid(format!("pivot {pivot} out of {n} layers")));
    }
    Ok(())
}

/// Prototype-to-prototype loss: pair losses between the pivot and every
/// other layer, summed and scaled by `norm`. `None` when fewer than two
/// classes are present.
pub fn p2p_on_tape(tape: &mut Tape, protos: &PrototypeVars, pivot: usize, tau: f64, norm: PairNorm) -> Result<Option<Var>> {
    let n = protos.layers.len();
    check_layers(n, pivot)?;
    let mut total: Option<Var> = None;
    for q in (0..n).filter(|&q| q != pivot) {
        let Some(pair) = p2p_pair_on_tape(tape, protos, pivot, q, tau)? else {
            log::debug!("fewer than two classes present; prototype loss skipped");
            return Ok(None);
        };
        total = Some(match total {
            Some(t) => tape.add(t, pair)?,
            None => pair,
        });
    }
    Ok(total.map(|t| tape.scale(t, norm.factor(n))))
}

/// Node-to-prototype loss with pivot-layer node anchors. Nodes whose class
/// prototype is absent are skipped. `None` when fewer than two classes are
/// present or no anchors remain.
pub fn n2p_on_tape(
    tape: &mut Tape,
    layers: &[Var],
    protos: &PrototypeVars,
    labels: &[usize],
    pivot: usize,
    tau: f64,
    norm: PairNorm,
) -> Result<Option<Var>> {
    check_tau(tau)?;
    let n = layers.len();
    check_layers(n, pivot)?;
    if protos.layers.len() != n {
        return Err(invalid("prototype and embedding layer counts differ"));
    }
    if protos.present.len() < 2 {
        log::debug!("fewer than two classes present; node-to-prototype loss skipped");
        return Ok(None);
    }
    let (anchors, rows): (Vec<usize>, Vec<usize>) = labels
        .iter()
        .enumerate()
        .filter_map(|(i, &y)| protos.row_of.get(y).copied().flatten().map(|r| (i, r)))
        .unzip();
    if anchors.is_empty() {
        return Ok(None);
    }
    let skipped = labels.len() - anchors.len();
    if skipped > 0 {
        log::debug!("{skipped} nodes without a class prototype skipped");
    }
    let at: Vec<(usize, usize)> = rows.iter().enumerate().map(|(i, &r)| (i, r)).collect();
    let h = tape.gather_rows(layers[pivot], anchors.into())?;
    let h = tape.normalize_rows(h);

    let mut total: Option<Var> = None;
    for q in (0..n).filter(|&q| q != pivot) {
        let mut den = None;
        let mut num = None;
        for l in [pivot, q] {
            let z = tape.normalize_rows(protos.layers[l]);
            let zt = tape.transpose(z);
            let s = tape.matmul(h, zt)?;
            let s = tape.scale(s, 1.0 / tau);
            let e = tape.exp(s);
            let d = tape.sum_rows(e);
            let own = tape.pick(e, at.clone())?;
            den = Some(match den {
                Some(x) => tape.add(x, d)?,
                None => d,
            });
            num = Some(match num {
                Some(x) => tape.add(x, own)?,
                None => own,
            });
        }
        let num = tape.scale(num.unwrap(), 0.5);
        let ln = tape.log(num)?;
        let ld = tape.log(den.unwrap())?;
        let per = tape.sub(ld, ln)?;
        let pair = tape.mean_scalar(per)?;
        total = Some(match total {
            Some(t) => tape.add(t, pair)?,
            None => pair,
        });
    }
    Ok(total.map(|t| tape.scale(t, norm.factor(n))))
}

// ----------------------------------------------------------------------
// plain-value forms
// ----------------------------------------------------------------------

/// Prototypes as plain values: one `num_classes × d` matrix per layer (rows
/// of absent classes are zero and flagged in `present`).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrototypeSet {
    pub layers: Vec<Matrix>,
    pub present: Vec<bool>,
    pub tau: f64,
}

impl PrototypeSet {
    pub fn prototype(&self, layer: usize, class: usize) -> Option<&[f64]> {
        self.present[class].then(|| self.layers[layer].row(class))
    }

    fn to_tape(&self, tape: &mut Tape) -> PrototypeVars {
        let present: Vec<usize> = (0..self.present.len()).filter(|&k| self.present[k]).collect();
        let mut row_of = vec![None; self.present.len()];
        for (r, &k) in present.iter().enumerate() {
            row_of[k] = Some(r);
        }
        let layers = self.layers.iter().map(|m| tape.constant(m.select_rows(&present))).collect();
        PrototypeVars { layers, present, row_of }
    }
}

pub fn compute_prototypes(layers: &[Matrix], labels: &[usize], num_classes: usize, tau: f64) -> Result<PrototypeSet> {
    check_tau(tau)?;
    let mut tape = Tape::new();
    let vars: Vec<Var> = layers.iter().map(|m| tape.constant(m.clone())).collect();
    let pv = prototypes_on_tape(&mut tape, &vars, labels, num_classes)?;
    let mut out = Vec::with_capacity(layers.len());
    for (l, &v) in pv.layers.iter().enumerate() {
        let mut full = Matrix::zeros(num_classes, layers[l].cols());
        for (r, &k) in pv.present.iter().enumerate() {
            full.row_mut(k).copy_from_slice(tape.value(v).row(r));
        }
        out.push(full);
    }
    let mut present = vec![false; num_classes];
    for &k in &pv.present {
        present[k] = true;
    }
    Ok(PrototypeSet { layers: out, present, tau })
}

pub fn p2p_loss(protos: &PrototypeSet, pivot: usize, norm: PairNorm) -> Result<Option<f64>> {
    let mut tape = Tape::new();
    let pv = protos.to_tape(&mut tape);
    Ok(p2p_on_tape(&mut tape, &pv, pivot, protos.tau, norm)?.map(|v| tape.value(v).item()))
}

pub fn p2p_pair_loss(protos: &PrototypeSet, p: usize, q: usize) -> Result<Option<f64>> {
    let mut tape = Tape::new();
    let pv = protos.to_tape(&mut tape);
    Ok(p2p_pair_on_tape(&mut tape, &pv, p, q, protos.tau)?.map(|v| tape.value(v).item()))
}

pub fn n2p_loss(
    layers: &[Matrix],
    protos: &PrototypeSet,
    labels: &[usize],
    pivot: usize,
    norm: PairNorm,
) -> Result<Option<f64>> {
    let mut tape = Tape::new();
    let pv = protos.to_tape(&mut tape);
    let vars: Vec<Var> = layers.iter().map(|m| tape.constant(m.clone())).collect();
    Ok(n2p_on_tape(&mut tape, &vars, &pv, labels, pivot, protos.tau, norm)?.map(|v| tape.value(v).item()))
}
