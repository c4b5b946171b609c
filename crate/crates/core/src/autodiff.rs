//! Dense reverse-mode differentiation on a linear tape.
//!
//! A [`Tape`] owns every intermediate value. Operations append a record and
//! return a [`Var`] handle; a record's inputs always precede it, so the tape
//! is already in topological order and backward is a single reverse sweep.
//! Results that depend only on constants are stored as untracked leaves and
//! never receive gradients.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::tensor::{dot, Matrix};

/// Handle to a value on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    AddScalar(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    Transpose(Var),
    RowSoftmax(Var),
    SegmentSoftmax(Var, Arc<[usize]>),
    SegmentSum(Var, Arc<[usize]>),
    SegmentMean(Var, Arc<[usize]>, Vec<f64>),
    Exp(Var),
    Log(Var),
    Elu(Var),
    LeakyRelu(Var, f64),
    Clamp(Var, f64, f64),
    CosineRows(Var, Var),
    NormalizeRows(Var),
    GatherRows(Var, Arc<[usize]>),
    Pick(Var, Vec<(usize, usize)>),
    SumRows(Var),
    SumAll(Var),
    MeanAll(Var),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    tracked: bool,
}

/// Computation record list plus gradient accumulators for tracked leaves.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Matrix>>,
}

/// How the right operand of an elementwise binary op is broadcast.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Row,
    Col,
    Scalar,
}

fn bcast_kind(op: &'static str, a: (usize, usize), b: (usize, usize)) -> Result<Bcast> {
    if a == b {
        Ok(Bcast::Same)
    } else if b == (1, 1) {
        Ok(Bcast::Scalar)
    } else if b.0 == 1 && b.1 == a.1 {
        Ok(Bcast::Row)
    } else if b.1 == 1 && b.0 == a.0 {
        Ok(Bcast::Col)
    } else {
        Err(Error::Shape { op, lhs: a, rhs: b })
    }
}

#[inline]
fn bidx(kind: Bcast, cols: usize, i: usize) -> usize {
    match kind {
        Bcast::Same => i,
        Bcast::Row => i % cols,
        Bcast::Col => i / cols,
        Bcast::Scalar => 0,
    }
}

fn check_segments(ids: &[usize], rows: usize, num_segments: Option<usize>) -> Result<()> {
    if ids.len() != rows {
        return Err(Error::Segments(format!("{} ids for {} rows", ids.len(), rows)));
    }
    if ids.windows(2).any(|w| w[0] > w[1]) {
        return Err(Error::Segments("segment ids must be sorted".into()));
    }
    if let (Some(n), Some(&last)) = (num_segments, ids.last()) {
        if last >= n {
            return Err(Error::Segments(format!("segment id {last} >= {n}")));
        }
    }
    Ok(())
}

/// Contiguous `[start, end)` row ranges sharing one segment id.
fn segment_runs(ids: &[usize]) -> impl Iterator<Item = (usize, usize, usize)> + '_ {
    let mut start = 0;
    std::iter::from_fn(move || {
        if start >= ids.len() {
            return None;
        }
        let id = ids[start];
        let mut end = start + 1;
        while end < ids.len() && ids[end] == id {
            end += 1;
        }
        let run = (id, start, end);
        start = end;
        Some(run)
    })
}

const NORM_FLOOR: f64 = 1e-12;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Matrix, op: Op, tracked: bool) -> Var {
        let op = if tracked { op } else { Op::Leaf };
        self.nodes.push(Node { value, op, tracked });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    /// A leaf that receives gradients.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives gradients.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.shape()
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// Accumulated gradient of a tracked leaf, if backward has reached it.
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn tracked_any(&self, vs: &[Var]) -> bool {
        vs.iter().any(|v| self.nodes[v.0].tracked)
    }

    // ------------------------------------------------------------------
    // forward ops
    // ------------------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        let t = self.tracked_any(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), t))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        let kind = bcast_kind(name, va.shape(), vb.shape())?;
        let cols = va.cols();
        let data: Vec<f64> = va
            .as_slice()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, vb.as_slice()[bidx(kind, cols, i)]))
            .collect();
        let out = Matrix::from_vec(va.rows(), cols, data)?;
        let t = self.tracked_any(&[a, b]);
        Ok(self.push(out, op, t))
    }

    /// Elementwise `a + b`; `b` may be a row, a column or a scalar broadcast.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| -x);
        let t = self.is_tracked(a);
        self.push(out, Op::Neg(a), t)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x * s);
        let t = self.is_tracked(a);
        self.push(out, Op::Scale(a, s), t)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|x| x + s);
        let t = self.is_tracked(a);
        self.push(out, Op::AddScalar(a), t)
    }

    /// Columns of the inputs side by side, in argument order.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| crate::error::invalid("concat_cols of nothing"))?;
        let rows = self.value(first).rows();
        let mut cols = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.0 != rows {
                return Err(Error::Shape { op: "concat_cols", lhs: self.shape(first), rhs: s });
            }
            cols += s.1;
        }
        let mut out = Matrix::zeros(rows, cols);
        for r in 0..rows {
            let mut off = 0;
            for &p in parts {
                let src = self.value(p).row(r);
                out.row_mut(r)[off..off + src.len()].copy_from_slice(src);
                off += src.len();
            }
        }
        let t = self.tracked_any(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), t))
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(a);
        if start > end || end > v.cols() {
            return Err(Error::Shape { op: "slice_cols", lhs: v.shape(), rhs: (start, end) });
        }
        let mut out = Matrix::zeros(v.rows(), end - start);
        for r in 0..v.rows() {
            out.row_mut(r).copy_from_slice(&v.row(r)[start..end]);
        }
        let t = self.is_tracked(a);
        Ok(self.push(out, Op::SliceCols(a, start), t))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let t = self.is_tracked(a);
        self.push(out, Op::Transpose(a), t)
    }

    /// Softmax of every row, stabilized by the row maximum.
    pub fn row_softmax(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let mut out = v.clone();
        for r in 0..out.rows() {
            softmax_in_place(out.row_mut(r));
        }
        let t = self.is_tracked(a);
        self.push(out, Op::RowSoftmax(a), t)
    }

    /// Softmax over the rows sharing a segment id, independently per column.
    /// `segment_ids` must be sorted.
    pub fn segment_softmax(&mut self, a: Var, segment_ids: Arc<[usize]>) -> Result<Var> {
        let v = self.value(a);
        check_segments(&segment_ids, v.rows(), None)?;
        let mut out = v.clone();
        let cols = v.cols();
        for (_, s, e) in segment_runs(&segment_ids) {
            for c in 0..cols {
                let mut m = f64::NEG_INFINITY;
                for r in s..e {
                    m = m.max(out.get(r, c));
                }
                let mut z = 0.0;
                for r in s..e {
                    let x = (out.get(r, c) - m).exp();
                    out.set(r, c, x);
                    z += x;
                }
                for r in s..e {
                    out.set(r, c, out.get(r, c) / z);
                }
            }
        }
        let t = self.is_tracked(a);
        Ok(self.push(out, Op::SegmentSoftmax(a, segment_ids), t))
    }

    /// Row sums per segment; segments without rows produce zero rows.
    pub fn segment_sum(&mut self, a: Var, segment_ids: Arc<[usize]>, num_segments: usize) -> Result<Var> {
        let v = self.value(a);
        check_segments(&segment_ids, v.rows(), Some(num_segments))?;
        let mut out = Matrix::zeros(num_segments, v.cols());
        for (r, &sid) in segment_ids.iter().enumerate() {
            for (o, x) in out.row_mut(sid).iter_mut().zip(v.row(r)) {
                *o += x;
            }
        }
        let t = self.is_tracked(a);
        Ok(self.push(out, Op::SegmentSum(a, segment_ids), t))
    }

    /// Row means per segment. Every segment must be non-empty.
    pub fn segment_mean(&mut self, a: Var, segment_ids: Arc<[usize]>, num_segments: usize) -> Result<Var> {
        let v = self.value(a);
        check_segments(&segment_ids, v.rows(), Some(num_segments))?;
        let mut counts = vec![0.0; num_segments];
        for &s in segment_ids.iter() {
            counts[s] += 1.0;
        }
        if let Some(empty) = counts.iter().position(|&c| c == 0.0) {
            return Err(Error::EmptySegment(empty));
        }
        let mut out = Matrix::zeros(num_segments, v.cols());
        for (r, &sid) in segment_ids.iter().enumerate() {
            for (o, x) in out.row_mut(sid).iter_mut().zip(v.row(r)) {
                *o += x;
            }
        }
        for (s, &c) in counts.iter().enumerate() {
            out.row_mut(s).iter_mut().for_each(|x| *x /= c);
        }
        let t = self.is_tracked(a);
        Ok(self.push(out, Op::SegmentMean(a, segment_ids, counts), t))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        let t = self.is_tracked(a);
        self.push(out, Op::Exp(a), t)
    }

    /// Natural log; every entry must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        if let Some(&bad) = v.as_slice().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::LogDomain(bad));
        }
        let out = v.map(f64::ln);
        let t = self.is_tracked(a);
        Ok(self.push(out, Op::Log(a), t))
    }

    pub fn elu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { x.exp_m1() });
        let t = self.is_tracked(a);
        self.push(out, Op::Elu(a), t)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        let t = self.is_tracked(a);
        self.push(out, Op::LeakyRelu(a, slope), t)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        let t = self.is_tracked(a);
        self.push(out, Op::Clamp(a, lo, hi), t)
    }

    /// Cosine similarity between matching rows of `a` and `b`, as a column.
    pub fn cosine_similarity_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(Error::Shape { op: "cosine_similarity_rows", lhs: va.shape(), rhs: vb.shape() });
        }
        let data = (0..va.rows())
            .map(|r| {
                let (x, y) = (va.row(r), vb.row(r));
                dot(x, y) / (norm(x).max(NORM_FLOOR) * norm(y).max(NORM_FLOOR))
            })
            .collect();
        let t = self.tracked_any(&[a, b]);
        Ok(self.push(Matrix::column(data), Op::CosineRows(a, b), t))
    }

    /// Every row scaled to unit Euclidean norm.
    pub fn normalize_rows(&mut self, a: Var) -> Var {
        let mut out = self.value(a).clone();
        for r in 0..out.rows() {
            let n = norm(out.row(r)).max(NORM_FLOOR);
            out.row_mut(r).iter_mut().for_each(|x| *x /= n);
        }
        let t = self.is_tracked(a);
        self.push(out, Op::NormalizeRows(a), t)
    }

    pub fn gather_rows(&mut self, a: Var, idx: Arc<[usize]>) -> Result<Var> {
        let v = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= v.rows()) {
            return Err(Error::Shape { op: "gather_rows", lhs: v.shape(), rhs: (bad, 0) });
        }
        let out = v.select_rows(&idx);
        let t = self.is_tracked(a);
        Ok(self.push(out, Op::GatherRows(a, idx), t))
    }

    /// Entries at `(row, col)` positions, as a column.
    pub fn pick(&mut self, a: Var, at: Vec<(usize, usize)>) -> Result<Var> {
        let v = self.value(a);
        let mut data = Vec::with_capacity(at.len());
        for &(r, c) in &at {
            if r >= v.rows() || c >= v.cols() {
                return Err(Error::Shape { op: "pick", lhs: v.shape(), rhs: (r, c) });
            }
            data.push(v.get(r, c));
        }
        let t = self.is_tracked(a);
        Ok(self.push(Matrix::column(data), Op::Pick(a, at), t))
    }

    /// Sum of each row, as a column.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let data = (0..v.rows()).map(|r| v.row(r).iter().sum()).collect();
        let t = self.is_tracked(a);
        self.push(Matrix::column(data), Op::SumRows(a), t)
    }

    pub fn sum_scalar(&mut self, a: Var) -> Var {
        let s = self.value(a).as_slice().iter().sum();
        let t = self.is_tracked(a);
        self.push(Matrix::scalar(s), Op::SumAll(a), t)
    }

    /// Mean of all entries. An empty input yields an error.
    pub fn mean_scalar(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a);
        let n = v.as_slice().len();
        if n == 0 {
            return Err(crate::error::invalid("mean of empty tensor"));
        }
        let s = v.as_slice().iter().sum::<f64>() / n as f64;
        let t = self.is_tracked(a);
        Ok(self.push(Matrix::scalar(s), Op::MeanAll(a), t))
    }

    // ------------------------------------------------------------------
    // backward
    // ------------------------------------------------------------------

    /// Accumulate `d scalar / d leaf` into every tracked leaf reachable from
    /// `scalar`. Repeated calls add up.
    pub fn backward(&mut self, scalar: Var) -> Result<()> {
        let shape = self.shape(scalar);
        if shape != (1, 1) {
            return Err(Error::NotScalar(shape));
        }
        if !self.is_tracked(scalar) {
            return Ok(());
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; scalar.0 + 1];
        adj[scalar.0] = Some(Matrix::scalar(1.0));

        for i in (0..=scalar.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.grads[i] {
                    Some(acc) => acc.add_assign(&g),
                    slot => *slot = Some(g),
                }
                continue;
            }
            for (input, contrib) in self.local_grads(i, &g)? {
                if !self.nodes[input.0].tracked {
                    continue;
                }
                match &mut adj[input.0] {
                    Some(acc) => acc.add_assign(&contrib),
                    slot => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of record `i` for each input.
    fn local_grads(&self, i: usize, g: &Matrix) -> Result<Vec<(Var, Matrix)>> {
        let node = &self.nodes[i];
        let y = &node.value;
        let val = |v: Var| &self.nodes[v.0].value;
        let tracked = |v: Var| self.nodes[v.0].tracked;
        let mut out = Vec::with_capacity(2);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if tracked(*a) {
                    out.push((*a, g.matmul_nt(val(*b))?));
                }
                if tracked(*b) {
                    out.push((*b, val(*a).matmul_tn(g)?));
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if tracked(*a) {
                    out.push((*a, g.clone()));
                }
                if tracked(*b) {
                    out.push((*b, reduce_bcast(g, val(*b).shape(), |gi, _| sign * gi)));
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let kind = bcast_kind("mul", va.shape(), vb.shape())?;
                let cols = va.cols();
                if tracked(*a) {
                    let data = g
                        .as_slice()
                        .iter()
                        .enumerate()
                        .map(|(k, &gi)| gi * vb.as_slice()[bidx(kind, cols, k)])
                        .collect();
                    out.push((*a, Matrix::from_vec(va.rows(), cols, data)?));
                }
                if tracked(*b) {
                    out.push((*b, reduce_bcast(g, vb.shape(), |gi, k| gi * va.as_slice()[k])));
                }
            }
            Op::Div(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let kind = bcast_kind("div", va.shape(), vb.shape())?;
                let cols = va.cols();
                if tracked(*a) {
                    let data = g
                        .as_slice()
                        .iter()
                        .enumerate()
                        .map(|(k, &gi)| gi / vb.as_slice()[bidx(kind, cols, k)])
                        .collect();
                    out.push((*a, Matrix::from_vec(va.rows(), cols, data)?));
                }
                if tracked(*b) {
                    out.push((
                        *b,
                        reduce_bcast(g, vb.shape(), |gi, k| {
                            let d = vb.as_slice()[bidx(kind, cols, k)];
                            -gi * va.as_slice()[k] / (d * d)
                        }),
                    ));
                }
            }
            Op::Neg(a) => out.push((*a, g.map(|x| -x))),
            Op::Scale(a, s) => out.push((*a, g.map(|x| x * s))),
            Op::AddScalar(a) => out.push((*a, g.clone())),
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    if tracked(p) {
                        let mut gp = Matrix::zeros(g.rows(), w);
                        for r in 0..g.rows() {
                            gp.row_mut(r).copy_from_slice(&g.row(r)[off..off + w]);
                        }
                        out.push((p, gp));
                    }
                    off += w;
                }
            }
            Op::SliceCols(a, start) => {
                let mut ga = Matrix::zeros(val(*a).rows(), val(*a).cols());
                for r in 0..g.rows() {
                    ga.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                out.push((*a, ga));
            }
            Op::Transpose(a) => out.push((*a, g.transpose())),
            Op::RowSoftmax(a) => {
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let (yr, gr) = (y.row(r), g.row(r));
                    let s = dot(yr, gr);
                    for (o, (&yi, &gi)) in ga.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = yi * (gi - s);
                    }
                }
                out.push((*a, ga));
            }
            Op::SegmentSoftmax(a, ids) => {
                let mut ga = Matrix::zeros(y.rows(), y.cols());
                for (_, s, e) in segment_runs(ids) {
                    for c in 0..y.cols() {
                        let dotp: f64 = (s..e).map(|r| y.get(r, c) * g.get(r, c)).sum();
                        for r in s..e {
                            ga.set(r, c, y.get(r, c) * (g.get(r, c) - dotp));
                        }
                    }
                }
                out.push((*a, ga));
            }
            Op::SegmentSum(a, ids) => {
                let rows = ids.len();
                let mut ga = Matrix::zeros(rows, g.cols());
                for (r, &sid) in ids.iter().enumerate() {
                    ga.row_mut(r).copy_from_slice(g.row(sid));
                }
                out.push((*a, ga));
            }
            Op::SegmentMean(a, ids, counts) => {
                let mut ga = Matrix::zeros(ids.len(), g.cols());
                for (r, &sid) in ids.iter().enumerate() {
                    let c = counts[sid];
                    for (o, &gi) in ga.row_mut(r).iter_mut().zip(g.row(sid)) {
                        *o = gi / c;
                    }
                }
                out.push((*a, ga));
            }
            Op::Exp(a) => out.push((*a, zip_map(g, y, |gi, yi| gi * yi))),
            Op::Log(a) => out.push((*a, zip_map(g, val(*a), |gi, xi| gi / xi))),
            Op::Elu(a) => out.push((
                *a,
                zip_map(g, val(*a), |gi, xi| if xi > 0.0 { gi } else { gi * xi.exp() }),
            )),
            Op::LeakyRelu(a, slope) => out.push((
                *a,
                zip_map(g, val(*a), |gi, xi| if xi > 0.0 { gi } else { gi * slope }),
            )),
            Op::Clamp(a, lo, hi) => out.push((
                *a,
                zip_map(g, val(*a), |gi, xi| if xi < *lo || xi > *hi { 0.0 } else { gi }),
            )),
            Op::CosineRows(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let mut ga = Matrix::zeros(va.rows(), va.cols());
                let mut gb = Matrix::zeros(vb.rows(), vb.cols());
                for r in 0..va.rows() {
                    let (x, z) = (va.row(r), vb.row(r));
                    let (nx, nz) = (norm(x).max(NORM_FLOOR), norm(z).max(NORM_FLOOR));
                    let cos = y.get(r, 0);
                    let gr = g.get(r, 0);
                    for k in 0..x.len() {
                        ga.set(r, k, gr * (z[k] / (nx * nz) - cos * x[k] / (nx * nx)));
                        gb.set(r, k, gr * (x[k] / (nx * nz) - cos * z[k] / (nz * nz)));
                    }
                }
                if tracked(*a) {
                    out.push((*a, ga));
                }
                if tracked(*b) {
                    out.push((*b, gb));
                }
            }
            Op::NormalizeRows(a) => {
                let va = val(*a);
                let mut ga = Matrix::zeros(va.rows(), va.cols());
                for r in 0..va.rows() {
                    let n = norm(va.row(r)).max(NORM_FLOOR);
                    let (yr, gr) = (y.row(r), g.row(r));
                    let s = dot(yr, gr);
                    for (o, (&yi, &gi)) in ga.row_mut(r).iter_mut().zip(yr.iter().zip(gr)) {
                        *o = (gi - yi * s) / n;
                    }
                }
                out.push((*a, ga));
            }
            Op::GatherRows(a, idx) => {
                let va = val(*a);
                let mut ga = Matrix::zeros(va.rows(), va.cols());
                for (r, &src) in idx.iter().enumerate() {
                    for (o, &gi) in ga.row_mut(src).iter_mut().zip(g.row(r)) {
                        *o += gi;
                    }
                }
                out.push((*a, ga));
            }
            Op::Pick(a, at) => {
                let va = val(*a);
                let mut ga = Matrix::zeros(va.rows(), va.cols());
                for (k, &(r, c)) in at.iter().enumerate() {
                    ga.set(r, c, ga.get(r, c) + g.get(k, 0));
                }
                out.push((*a, ga));
            }
            Op::SumRows(a) => {
                let va = val(*a);
                let mut ga = Matrix::zeros(va.rows(), va.cols());
                for r in 0..va.rows() {
                    let gr = g.get(r, 0);
                    ga.row_mut(r).iter_mut().for_each(|x| *x = gr);
                }
                out.push((*a, ga));
            }
            Op::SumAll(a) => {
                let (r, c) = val(*a).shape();
                out.push((*a, Matrix::filled(r, c, g.item())));
            }
            Op::MeanAll(a) => {
                let (r, c) = val(*a).shape();
                out.push((*a, Matrix::filled(r, c, g.item() / (r * c) as f64)));
            }
        }
        Ok(out)
    }
}

fn norm(x: &[f64]) -> f64 {
    dot(x, x).sqrt()
}

fn zip_map(g: &Matrix, x: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    let data = g.as_slice().iter().zip(x.as_slice()).map(|(&a, &b)| f(a, b)).collect();
    Matrix::from_vec(g.rows(), g.cols(), data).expect("same shape")
}

/// Sum `f(g[k], k)` back down to the broadcast operand's shape.
fn reduce_bcast(g: &Matrix, target: (usize, usize), f: impl Fn(f64, usize) -> f64) -> Matrix {
    let kind = bcast_kind("reduce", g.shape(), target).expect("validated in forward");
    let cols = g.cols();
    let mut out = Matrix::zeros(target.0, target.1);
    for (k, &gi) in g.as_slice().iter().enumerate() {
        out.as_mut_slice()[bidx(kind, cols, k)] += f(gi, k);
    }
    out
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        z += *x;
    }
    row.iter_mut().for_each(|x| *x /= z);
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn row_softmax_of_zeros_is_uniform() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::zeros(1, 2));
        let y = t.row_softmax(x);
        assert_eq!(t.value(y).as_slice(), &[0.5, 0.5]);
    }

    #[test]
    fn concat_keeps_argument_order() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::filled(2, 3, 1.0));
        let b = t.constant(Matrix::filled(2, 2, 2.0));
        let c = t.concat_cols(&[a, b]).unwrap();
        assert_eq!(t.shape(c), (2, 5));
        assert_eq!(t.value(c).row(1), &[1.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn segment_mean_of_one_segment() {
        let mut t = Tape::new();
        let x = t.constant(Matrix::column(vec![1.0, 3.0]));
        let m = t.segment_mean(x, Arc::from(vec![0, 0]), 1).unwrap();
        assert_eq!(t.value(m).as_slice(), &[2.0]);
    }

    #[test]
    fn square_has_gradient_six_at_three() {
        let mut t = Tape::new();
        let x = t.param(Matrix::scalar(3.0));
        let y = t.mul(x, x).unwrap();
        t.backward(y).unwrap();
        assert_eq!(t.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn backward_accumulates() {
        let mut t = Tape::new();
        let x = t.param(Matrix::from_rows(&[[1.0, -2.0]]).unwrap());
        let e = t.exp(x);
        let s = t.sum_scalar(e);
        t.backward(s).unwrap();
        let once = t.grad(x).unwrap().clone();
        t.backward(s).unwrap();
        let twice = t.grad(x).unwrap();
        for (a, b) in once.as_slice().iter().zip(twice.as_slice()) {
            assert_eq!(2.0 * a, *b);
        }
    }

    #[test]
    fn errors_are_reported() {
        let mut t = Tape::new();
        let a = t.param(Matrix::zeros(2, 3));
        let b = t.constant(Matrix::zeros(2, 3));
        assert!(matches!(t.matmul(a, b), Err(Error::Shape { .. })));
        assert!(matches!(t.log(b), Err(Error::LogDomain(_))));
        assert!(matches!(t.backward(a), Err(Error::NotScalar((2, 3)))));
        let c = t.constant(Matrix::column(vec![1.0]));
        assert!(matches!(
            t.segment_mean(c, Arc::from(vec![1]), 2),
            Err(Error::EmptySegment(0))
        ));
    }

    #[test]
    fn constants_are_not_recorded() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::scalar(2.0));
        let b = t.exp(a);
        assert!(!t.is_tracked(b));
        t.backward(b).unwrap();
        assert!(t.grad(a).is_none());
    }
}
