//! Multi-head graph attention encoder with cross-layer concatenation and a
//! `(C+1)`-way open-set classifier.
//!
//! Layer `l` runs `K` attention heads over `N(i) ∪ {i}`:
//! `e_ij = leaky_relu(a_selfᵀ W h_i + a_nbrᵀ W h_j)`, softmax over `j`, and
//! `h_i' = Σ_j α_ij W h_j`. Heads are concatenated (width `K·F'`), ELU is
//! applied between layers, and the final embedding concatenates every
//! layer's output (width `L·K·F'`).

use std::sync::Arc;

use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{invalid, Error, Result};
use crate::graph::Graph;
use crate::rng::Pcg64;
use crate::tensor::{argmax, Matrix};

/// Probabilities clamp into `[PROB_FLOOR, 1 - PROB_FLOOR]` before any log.
pub const PROB_FLOOR: f64 = 1e-12;

/// Attention slope used when none is configured.
pub const DEFAULT_ATTENTION_SLOPE: f64 = 0.2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadParams {
    /// `in_dim × F'`
    pub weight: Matrix,
    /// Half of the attention vector applied to the center node, `F' × 1`.
    pub att_self: Matrix,
    /// Half of the attention vector applied to the neighbor, `F' × 1`.
    pub att_neighbor: Matrix,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderParams {
    pub heads: usize,
    pub embed_dim: usize,
    pub slope: f64,
    /// `layers[l][k]` is head `k` of layer `l`.
    pub layers: Vec<Vec<HeadParams>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierParams {
    /// `L·K·F' × (C+1)`
    pub weight: Matrix,
    /// `1 × (C+1)`, absent when the classifier is bias-free.
    pub bias: Option<Matrix>,
}

/// Encoder plus classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub encoder: EncoderParams,
    pub classifier: ClassifierParams,
}

/// Sizes needed to build a model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelDims {
    pub in_dim: usize,
    pub heads: usize,
    pub layers: usize,
    pub embed_dim: usize,
    /// Output width, `C + 1`.
    pub num_outputs: usize,
    pub bias: bool,
}

impl ModelDims {
    pub fn layer_width(&self) -> usize {
        self.heads * self.embed_dim
    }

    pub fn final_width(&self) -> usize {
        self.layers * self.layer_width()
    }
}

fn glorot(rows: usize, cols: usize, rng: &mut Pcg64) -> Matrix {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.random_range(-a..a)).collect();
    Matrix::from_vec(rows, cols, data).expect("sized")
}

impl ModelParams {
    /// Glorot-uniform weights and attention vectors, zero bias.
    pub fn init(dims: ModelDims, rng: &mut Pcg64) -> Result<Self> {
        if dims.heads == 0 || dims.layers == 0 || dims.embed_dim == 0 || dims.in_dim == 0 {
            return Err(invalid(format!("degenerate model dims {dims:?}")));
        }
        if dims.num_outputs < 2 {
            return Err(invalid("classifier needs at least two outputs"));
        }
        let f = dims.embed_dim;
        let mut layers = Vec::with_capacity(dims.layers);
        for l in 0..dims.layers {
            let in_dim = if l == 0 { dims.in_dim } else { dims.layer_width() };
            let heads = (0..dims.heads)
                .map(|_| {
                    let weight = glorot(in_dim, f, rng);
                    let att = glorot(2 * f, 1, rng).into_vec();
                    HeadParams {
                        weight,
                        att_self: Matrix::column(att[..f].to_vec()),
                        att_neighbor: Matrix::column(att[f..].to_vec()),
                    }
                })
                .collect();
            layers.push(heads);
        }
        let classifier = ClassifierParams {
            weight: glorot(dims.final_width(), dims.num_outputs, rng),
            bias: dims.bias.then(|| Matrix::zeros(1, dims.num_outputs)),
        };
        Ok(Self {
            encoder: EncoderParams { heads: dims.heads, embed_dim: f, slope: DEFAULT_ATTENTION_SLOPE, layers },
            classifier,
        })
    }

    pub fn dims(&self) -> ModelDims {
        let e = &self.encoder;
        ModelDims {
            in_dim: e.layers[0][0].weight.rows(),
            heads: e.heads,
            layers: e.layers.len(),
            embed_dim: e.embed_dim,
            num_outputs: self.classifier.weight.cols(),
            bias: self.classifier.bias.is_some(),
        }
    }

    /// Every tensor with a stable name, in a fixed order.
    pub fn named_tensors(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (l, heads) in self.encoder.layers.iter().enumerate() {
            for (k, h) in heads.iter().enumerate() {
                out.push((format!("layer{l}.head{k}.weight"), &h.weight));
                out.push((format!("layer{l}.head{k}.att_self"), &h.att_self));
                out.push((format!("layer{l}.head{k}.att_neighbor"), &h.att_neighbor));
            }
        }
        out.push(("classifier.weight".into(), &self.classifier.weight));
        if let Some(b) = &self.classifier.bias {
            out.push(("classifier.bias".into(), b));
        }
        out
    }

    /// Mutable tensors in the same order as [`Self::named_tensors`].
    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut out = Vec::new();
        for heads in &mut self.encoder.layers {
            for h in heads {
                out.push(&mut h.weight);
                out.push(&mut h.att_self);
                out.push(&mut h.att_neighbor);
            }
        }
        out.push(&mut self.classifier.weight);
        if let Some(b) = &mut self.classifier.bias {
            out.push(b);
        }
        out
    }

    /// Register every tensor on `tape`, as parameters or as constants.
    pub fn to_tape(&self, tape: &mut Tape, trainable: bool) -> ModelVars {
        let mut put = |m: &Matrix| if trainable { tape.param(m.clone()) } else { tape.constant(m.clone()) };
        let layers = self
            .encoder
            .layers
            .iter()
            .map(|heads| {
                heads
                    .iter()
                    .map(|h| HeadVars {
                        weight: put(&h.weight),
                        att_self: put(&h.att_self),
                        att_neighbor: put(&h.att_neighbor),
                    })
                    .collect()
            })
            .collect();
        let weight = put(&self.classifier.weight);
        let bias = self.classifier.bias.as_ref().map(&mut put);
        ModelVars { layers, slope: self.encoder.slope, classifier: ClassifierVars { weight, bias } }
    }
}

#[derive(Debug, Clone, Copy)]
pub struct HeadVars {
    pub weight: Var,
    pub att_self: Var,
    pub att_neighbor: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct ClassifierVars {
    pub weight: Var,
    pub bias: Option<Var>,
}

/// Tape handles for a [`ModelParams`], in the same order as `tensors_mut`.
#[derive(Debug, Clone)]
pub struct ModelVars {
    pub layers: Vec<Vec<HeadVars>>,
    pub slope: f64,
    pub classifier: ClassifierVars,
}

impl ModelVars {
    pub fn all(&self) -> Vec<Var> {
        let mut out = Vec::new();
        for heads in &self.layers {
            for h in heads {
                out.extend([h.weight, h.att_self, h.att_neighbor]);
            }
        }
        out.push(self.classifier.weight);
        out.extend(self.classifier.bias);
        out
    }
}

/// Attention neighborhoods `N(i) ∪ {i}` as parallel arrays sorted by center.
/// Within a center's run the node itself comes first.
#[derive(Debug, Clone)]
pub struct AttentionIndex {
    pub num_nodes: usize,
    pub centers: Arc<[usize]>,
    pub sources: Arc<[usize]>,
}

impl AttentionIndex {
    pub fn new(graph: &Graph) -> Self {
        let n = graph.num_nodes();
        let mut centers = Vec::with_capacity(n + 2 * graph.num_edges());
        let mut sources = Vec::with_capacity(centers.capacity());
        for i in 0..n {
            centers.push(i);
            sources.push(i);
            for &j in graph.neighbors(i) {
                centers.push(i);
                sources.push(j);
            }
        }
        Self { num_nodes: n, centers: centers.into(), sources: sources.into() }
    }
}

/// Per-layer embeddings and their concatenation.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerEmbeddings {
    pub layers: Vec<Matrix>,
    pub concat: Matrix,
}

/// Tape handles for the encoder outputs.
#[derive(Debug, Clone)]
pub struct EncodedVars {
    pub layers: Vec<Var>,
    pub concat: Var,
}

fn attention_head(tape: &mut Tape, index: &AttentionIndex, x: Var, head: &HeadVars, slope: f64) -> Result<Var> {
    let wh = tape.matmul(x, head.weight)?;
    let s_self = tape.matmul(wh, head.att_self)?;
    let s_nbr = tape.matmul(wh, head.att_neighbor)?;
    let s_center = tape.gather_rows(s_self, index.centers.clone())?;
    let s_source = tape.gather_rows(s_nbr, index.sources.clone())?;
    let raw = tape.add(s_center, s_source)?;
    let scores = tape.leaky_relu(raw, slope);
    let alpha = tape.segment_softmax(scores, index.centers.clone())?;
    let msgs = tape.gather_rows(wh, index.sources.clone())?;
    let weighted = tape.mul(msgs, alpha)?;
    tape.segment_sum(weighted, index.centers.clone(), index.num_nodes)
}

/// Run the encoder on `tape`. `x` holds node features, `N × in_dim`.
pub fn encode_on_tape(tape: &mut Tape, index: &AttentionIndex, x: Var, model: &ModelVars) -> Result<EncodedVars> {
    let mut input = x;
    let mut outs = Vec::with_capacity(model.layers.len());
    for (l, heads) in model.layers.iter().enumerate() {
        let expected = tape.shape(heads[0].weight).0;
        if tape.shape(input).1 != expected {
            return Err(Error::Shape {
                op: "encode",
                lhs: tape.shape(input),
                rhs: tape.shape(heads[0].weight),
            });
        }
        let per_head = heads
            .iter()
            .map(|h| attention_head(tape, index, input, h, model.slope))
            .collect::<Result<Vec<_>>>()?;
        let joined = if per_head.len() == 1 { per_head[0] } else { tape.concat_cols(&per_head)? };
        let out = if l + 1 < model.layers.len() { tape.elu(joined) } else { joined };
        outs.push(out);
        input = out;
    }
    let concat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    Ok(EncodedVars { layers: outs, concat })
}

/// Logits `H·W + b` and their row softmax.
pub fn classify_on_tape(tape: &mut Tape, h: Var, cls: &ClassifierVars) -> Result<(Var, Var)> {
    let (hw, ww) = (tape.shape(h).1, tape.shape(cls.weight).0);
    if hw != ww {
        return Err(Error::Shape { op: "classify", lhs: tape.shape(h), rhs: tape.shape(cls.weight) });
    }
    let mut logits = tape.matmul(h, cls.weight)?;
    if let Some(b) = cls.bias {
        logits = tape.add(logits, b)?;
    }
    let probs = tape.row_softmax(logits);
    Ok((logits, probs))
}

/// `−mean log p_{i, y_i}` over `nodes`.
pub fn cross_entropy_on_tape(tape: &mut Tape, probs: Var, nodes: &[usize], labels: &[usize]) -> Result<Var> {
    if nodes.is_empty() {
        return Err(invalid("cross entropy over an empty mask"));
    }
    let at = nodes.iter().map(|&i| (i, labels[i])).collect();
    let p = tape.pick(probs, at)?;
    let p = tape.clamp(p, PROB_FLOOR, 1.0);
    let lp = tape.log(p)?;
    let m = tape.mean_scalar(lp)?;
    Ok(tape.neg(m))
}

/// Encode the whole graph with fixed parameters.
pub fn encode(graph: &Graph, params: &ModelParams) -> Result<LayerEmbeddings> {
    let mut tape = Tape::new();
    let vars = params.to_tape(&mut tape, false);
    let x = tape.constant(graph.features().clone());
    let enc = encode_on_tape(&mut tape, &AttentionIndex::new(graph), x, &vars)?;
    Ok(LayerEmbeddings {
        layers: enc.layers.iter().map(|&v| tape.value(v).clone()).collect(),
        concat: tape.value(enc.concat).clone(),
    })
}

/// Class probabilities for embedding rows.
pub fn classify(h: &Matrix, cls: &ClassifierParams) -> Result<Matrix> {
    let mut tape = Tape::new();
    let hv = tape.constant(h.clone());
    let w = tape.constant(cls.weight.clone());
    let b = cls.bias.as_ref().map(|b| tape.constant(b.clone()));
    let (_, p) = classify_on_tape(&mut tape, hv, &ClassifierVars { weight: w, bias: b })?;
    Ok(tape.value(p).clone())
}

/// Row argmax; ties go to the lowest class index.
pub fn predict(probs: &Matrix) -> Vec<usize> {
    (0..probs.rows()).map(|r| argmax(probs.row(r))).collect()
}

/// Mean negative log-likelihood of the true class over the masked rows.
pub fn cross_entropy_loss(probs: &Matrix, labels: &[usize], mask: &[bool]) -> Result<f64> {
    let nodes: Vec<usize> = (0..probs.rows()).filter(|&i| mask[i]).collect();
    let mut tape = Tape::new();
    let p = tape.constant(probs.clone());
    let l = cross_entropy_on_tape(&mut tape, p, &nodes, labels)?;
    Ok(tape.value(l).item())
}
