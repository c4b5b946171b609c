//! One finite-difference case per differentiable op and loss term.

use std::sync::Arc;

use negmix::autodiff::{Tape, Var};
use negmix::config::TrainConfig;
use negmix::encoder::{
    classify_on_tape, cross_entropy_on_tape, encode_on_tape, AttentionIndex, ClassifierVars, HeadVars, ModelDims,
    ModelParams, ModelVars,
};
use negmix::gcl::{n2p_on_tape, p2p_on_tape, prototypes_on_tape, PairNorm};
use negmix::graph::{make_openset_split, synth_sbm, Graph, SbmParams};
use negmix::mixup::{
    conventional_ood_on_tape, mix_on_tape, negative_learning_on_tape, positive_learning_on_tape,
    soft_cross_entropy_on_tape, MixSign,
};
use negmix::ood::{ood_regularization_on_tape, ood_score_on_tape, EntropyMode, NeighborIndex};
use negmix::tensor::Matrix;
use negmix::trainer::{epoch_gradients, model_dims};
use rand::RngExt;
use rand_pcg::Pcg64;

use super::{central_difference, grad_check, RelErr, positive_matrix, random_matrix, weighted_sum};

pub type Case = fn(&mut Pcg64) -> f64;

/// Values at least `gap` away from every kink in `kinks`.
fn away_from(rng: &mut Pcg64, rows: usize, cols: usize, kinks: &[f64], gap: f64) -> Matrix {
    let mut m = random_matrix(rng, rows, cols, 2.0);
    for v in m.as_mut_slice() {
        while kinks.iter().any(|k| (*v - k).abs() < gap) {
            *v = rng.random_range(-2.0..2.0);
        }
    }
    m
}

fn dims(rng: &mut Pcg64) -> (usize, usize) {
    (rng.random_range(1..5usize), rng.random_range(1..5usize))
}

/// Sorted segment ids over `rows` rows covering every one of `segments`.
fn segment_ids(rng: &mut Pcg64, segments: usize, extra: usize) -> Arc<[usize]> {
    let mut ids: Vec<usize> = (0..segments).collect();
    ids.extend((0..extra).map(|_| rng.random_range(0..segments)));
    ids.sort_unstable();
    ids.into()
}

fn unary(rng: &mut Pcg64, x: Matrix, op: fn(&mut Tape, Var) -> negmix::Result<Var>) -> f64 {
    let salt = rng.random_range(0..100u64);
    grad_check(&[x], move |t, v| {
        let y = op(t, v[0])?;
        weighted_sum(t, y, salt)
    })
}

fn broadcast_shape(rng: &mut Pcg64, r: usize, c: usize) -> (usize, usize) {
    match rng.random_range(0..4) {
        0 => (r, c),
        1 => (1, c),
        2 => (r, 1),
        _ => (1, 1),
    }
}

fn binary(rng: &mut Pcg64, positive_rhs: bool, op: fn(&mut Tape, Var, Var) -> negmix::Result<Var>) -> f64 {
    let (r, c) = dims(rng);
    let (br, bc) = broadcast_shape(rng, r, c);
    let a = random_matrix(rng, r, c, 2.0);
    let b = if positive_rhs { positive_matrix(rng, br, bc) } else { random_matrix(rng, br, bc, 2.0) };
    let salt = rng.random_range(0..100u64);
    grad_check(&[a, b], move |t, v| {
        let y = op(t, v[0], v[1])?;
        weighted_sum(t, y, salt)
    })
}

fn probs_of(t: &mut Tape, logits: Var) -> Var {
    t.row_softmax(logits)
}

/// Small SBM graph with an open-set split; C = 2 known classes.
fn tiny_graph(rng: &mut Pcg64) -> Graph {
    let p = SbmParams {
        n_per_class: 5,
        classes: 3,
        p_in: 0.6,
        p_out: 0.1,
        feat_dim: 3,
        feat_shift: 2.0,
        seed: rng.random_range(0..1000u64),
    };
    synth_sbm(&p).unwrap()
}

fn model_vars(vars: &[Var], dims: ModelDims, slope: f64) -> ModelVars {
    let mut it = vars.iter().copied();
    let layers = (0..dims.layers)
        .map(|_| {
            (0..dims.heads)
                .map(|_| HeadVars {
                    weight: it.next().unwrap(),
                    att_self: it.next().unwrap(),
                    att_neighbor: it.next().unwrap(),
                })
                .collect()
        })
        .collect();
    let weight = it.next().unwrap();
    let bias = if dims.bias { it.next() } else { None };
    ModelVars { layers, slope, classifier: ClassifierVars { weight, bias } }
}

fn op_cases() -> Vec<(&'static str, Case)> {
    vec![
        ("matmul", |rng| {
            let (r, k) = dims(rng);
            let c = rng.random_range(1..5);
            let a = random_matrix(rng, r, k, 1.0);
            let b = random_matrix(rng, k, c, 1.0);
            grad_check(&[a, b], |t, v| {
                let y = t.matmul(v[0], v[1])?;
                weighted_sum(t, y, 3)
            })
        }),
        ("add", |rng| binary(rng, false, |t, a, b| t.add(a, b))),
        ("sub", |rng| binary(rng, false, |t, a, b| t.sub(a, b))),
        ("mul", |rng| binary(rng, false, |t, a, b| t.mul(a, b))),
        ("div", |rng| binary(rng, true, |t, a, b| t.div(a, b))),
        ("neg", |rng| {
            let (r, c) = dims(rng);
            let x = random_matrix(rng, r, c, 2.0);
            unary(rng, x, |t, a| Ok(t.neg(a)))
        }),
        ("scale", |rng| {
            let (r, c) = dims(rng);
            let x = random_matrix(rng, r, c, 2.0);
            unary(rng, x, |t, a| Ok(t.scale(a, -1.7)))
        }),
        ("add_scalar", |rng| {
            let (r, c) = dims(rng);
            let x = random_matrix(rng, r, c, 2.0);
            // squared so the constant shift reaches the gradient
            unary(rng, x, |t, a| {
                let s = t.add_scalar(a, 0.3);
                t.mul(s, s)
            })
        }),
        ("concat_cols", |rng| {
            let r = rng.random_range(1..5);
            let (ca, cb) = (rng.random_range(1..4), rng.random_range(1..4));
            let a = random_matrix(rng, r, ca, 1.0);
            let b = random_matrix(rng, r, cb, 1.0);
            grad_check(&[a, b], |t, v| {
                let y = t.concat_cols(&[v[0], v[1], v[0]])?;
                weighted_sum(t, y, 5)
            })
        }),
        ("slice_cols", |rng| {
            let r = rng.random_range(1..5);
            let c = rng.random_range(2..6);
            let x = random_matrix(rng, r, c, 1.0);
            let start = rng.random_range(0..c - 1);
            let end = rng.random_range(start + 1..=c);
            grad_check(&[x], move |t, v| {
                let y = t.slice_cols(v[0], start, end)?;
                let y2 = t.mul(y, y)?;
                weighted_sum(t, y2, 1)
            })
        }),
        ("transpose", |rng| {
            let (r, c) = dims(rng);
            let x = random_matrix(rng, r, c, 1.0);
            unary(rng, x, |t, a| Ok(t.transpose(a)))
        }),
        ("row_softmax", |rng| {
            let r = rng.random_range(1..5);
            let c = rng.random_range(2..6);
            let x = random_matrix(rng, r, c, 3.0);
            unary(rng, x, |t, a| Ok(t.row_softmax(a)))
        }),
        ("segment_softmax", |rng| {
            let segs = rng.random_range(1..4);
            let extra = rng.random_range(0..6);
            let ids = segment_ids(rng, segs, extra);
            let cols = rng.random_range(1..3);
            let x = random_matrix(rng, ids.len(), cols, 3.0);
            let salt = rng.random_range(0..100u64);
            grad_check(&[x], move |t, v| {
                let y = t.segment_softmax(v[0], ids.clone())?;
                weighted_sum(t, y, salt)
            })
        }),
        ("segment_sum", |rng| {
            let segs = rng.random_range(1..4);
            let extra = rng.random_range(0..6);
            let ids = segment_ids(rng, segs, extra);
            let cols = rng.random_range(1..3);
            let x = random_matrix(rng, ids.len(), cols, 1.0);
            grad_check(&[x], move |t, v| {
                // one trailing empty segment
                let y = t.segment_sum(v[0], ids.clone(), segs + 1)?;
                let y2 = t.mul(y, y)?;
                weighted_sum(t, y2, 2)
            })
        }),
        ("segment_mean", |rng| {
            let segs = rng.random_range(1..4);
            let extra = rng.random_range(0..6);
            let ids = segment_ids(rng, segs, extra);
            let cols = rng.random_range(1..3);
            let x = random_matrix(rng, ids.len(), cols, 1.0);
            grad_check(&[x], move |t, v| {
                let y = t.segment_mean(v[0], ids.clone(), segs)?;
                let y2 = t.mul(y, y)?;
                weighted_sum(t, y2, 4)
            })
        }),
        ("exp", |rng| {
            let (r, c) = dims(rng);
            let x = random_matrix(rng, r, c, 2.0);
            unary(rng, x, |t, a| Ok(t.exp(a)))
        }),
        ("log", |rng| {
            let (r, c) = dims(rng);
            let x = positive_matrix(rng, r, c);
            unary(rng, x, |t, a| t.log(a))
        }),
        ("elu", |rng| {
            let (r, c) = dims(rng);
            let x = away_from(rng, r, c, &[0.0], 1e-3);
            unary(rng, x, |t, a| Ok(t.elu(a)))
        }),
        ("leaky_relu", |rng| {
            let (r, c) = dims(rng);
            let x = away_from(rng, r, c, &[0.0], 1e-3);
            unary(rng, x, |t, a| Ok(t.leaky_relu(a, 0.2)))
        }),
        ("clamp", |rng| {
            let (r, c) = dims(rng);
            let x = away_from(rng, r, c, &[-1.0, 1.0], 1e-3);
            unary(rng, x, |t, a| Ok(t.clamp(a, -1.0, 1.0)))
        }),
        ("cosine_similarity_rows", |rng| {
            let r = rng.random_range(1..5);
            let c = rng.random_range(2..5);
            let a = random_matrix(rng, r, c, 1.0);
            let b = random_matrix(rng, r, c, 1.0);
            grad_check(&[a, b], |t, v| {
                let y = t.cosine_similarity_rows(v[0], v[1])?;
                weighted_sum(t, y, 6)
            })
        }),
        ("normalize_rows", |rng| {
            let r = rng.random_range(1..5);
            let c = rng.random_range(2..5);
            let x = random_matrix(rng, r, c, 1.0);
            unary(rng, x, |t, a| Ok(t.normalize_rows(a)))
        }),
        ("gather_rows", |rng| {
            let (r, c) = dims(rng);
            let x = random_matrix(rng, r, c, 1.0);
            let idx: Arc<[usize]> = (0..rng.random_range(1..7)).map(|_| rng.random_range(0..r)).collect();
            grad_check(&[x], move |t, v| {
                let y = t.gather_rows(v[0], idx.clone())?;
                let y2 = t.mul(y, y)?;
                weighted_sum(t, y2, 8)
            })
        }),
        ("pick", |rng| {
            let (r, c) = dims(rng);
            let x = random_matrix(rng, r, c, 1.0);
            let at: Vec<(usize, usize)> =
                (0..rng.random_range(1..7)).map(|_| (rng.random_range(0..r), rng.random_range(0..c))).collect();
            grad_check(&[x], move |t, v| {
                let y = t.pick(v[0], at.clone())?;
                let y2 = t.mul(y, y)?;
                weighted_sum(t, y2, 9)
            })
        }),
        ("sum_rows", |rng| {
            let (r, c) = dims(rng);
            let x = random_matrix(rng, r, c, 1.0);
            unary(rng, x, |t, a| {
                let s = t.sum_rows(a);
                t.mul(s, s)
            })
        }),
        ("sum_scalar", |rng| {
            let (r, c) = dims(rng);
            let x = random_matrix(rng, r, c, 1.0);
            grad_check(&[x], |t, v| {
                let s = t.sum_scalar(v[0]);
                t.mul(s, s)
            })
        }),
        ("mean_scalar", |rng| {
            let (r, c) = dims(rng);
            let x = random_matrix(rng, r, c, 1.0);
            grad_check(&[x], |t, v| {
                let s = t.mean_scalar(v[0])?;
                let e = t.exp(s);
                Ok(e)
            })
        }),
    ]
}

fn loss_cases() -> Vec<(&'static str, Case)> {
    vec![
        ("cross_entropy", |rng| {
            let n = rng.random_range(2..8);
            let c = rng.random_range(2..5);
            let logits = random_matrix(rng, n, c + 1, 2.0);
            let labels: Vec<usize> = (0..n).map(|_| rng.random_range(0..=c)).collect();
            let nodes: Vec<usize> = (0..n).filter(|_| rng.random_bool(0.7)).chain([0]).collect();
            grad_check(&[logits], move |t, v| {
                let p = probs_of(t, v[0]);
                cross_entropy_on_tape(t, p, &nodes, &labels)
            })
        }),
        ("ood_score_regularization", |rng| {
            let g = tiny_graph(rng);
            let n = g.num_nodes();
            let logits = random_matrix(rng, n, 3, 2.0);
            let index = NeighborIndex::new(&g);
            let mode = if rng.random_bool(0.5) { EntropyMode::Renormalized } else { EntropyMode::Raw };
            let labeled: Vec<usize> = (0..n).filter(|i| i % 3 == 0).collect();
            let cands: Vec<usize> = (0..n).filter(|i| i % 4 == 1).collect();
            grad_check(&[logits], move |t, v| {
                let p = probs_of(t, v[0]);
                let o = ood_score_on_tape(t, p, &index, mode)?;
                ood_regularization_on_tape(t, o.scores, &labeled, &cands).map(|r| r.unwrap())
            })
        }),
        ("ood_score", |rng| {
            let g = tiny_graph(rng);
            let logits = random_matrix(rng, g.num_nodes(), 3, 2.0);
            let index = NeighborIndex::new(&g);
            grad_check(&[logits], move |t, v| {
                let p = probs_of(t, v[0]);
                let o = ood_score_on_tape(t, p, &index, EntropyMode::Renormalized)?;
                weighted_sum(t, o.scores, 11)
            })
        }),
        ("positive_mixup_id", |rng| mixup_case(rng, Loss::IdMixup)),
        ("conventional_ood_mixup", |rng| mixup_case(rng, Loss::Conventional)),
        ("positive_learning", |rng| mixup_case(rng, Loss::PositiveLearning)),
        ("negative_learning", |rng| mixup_case(rng, Loss::NegativeLearning)),
        ("prototype_to_prototype", |rng| gcl_case(rng, false)),
        ("node_to_prototype", |rng| gcl_case(rng, true)),
        ("encoder", |rng| {
            let g = tiny_graph(rng);
            let dims = ModelDims {
                in_dim: g.num_features(),
                heads: rng.random_range(1..3),
                layers: rng.random_range(1..3),
                embed_dim: 2,
                num_outputs: 3,
                bias: rng.random_bool(0.5),
            };
            let params = ModelParams::init(dims, &mut negmix::rng::stream(rng.random(), "init")).unwrap();
            let slope = params.encoder.slope;
            let inputs: Vec<Matrix> = params.named_tensors().into_iter().map(|(_, m)| m.clone()).collect();
            let index = AttentionIndex::new(&g);
            let x = g.features().clone();
            let labels: Vec<usize> = (0..g.num_nodes()).map(|i| i % 3).collect();
            let nodes: Vec<usize> = (0..g.num_nodes()).collect();
            grad_check(&inputs, move |t, v| {
                let model = model_vars(v, dims, slope);
                let xv = t.constant(x.clone());
                let enc = encode_on_tape(t, &index, xv, &model)?;
                let (_, p) = classify_on_tape(t, enc.concat, &model.classifier)?;
                cross_entropy_on_tape(t, p, &nodes, &labels)
            })
        }),
    ]
}

#[derive(Clone, Copy)]
enum Loss {
    IdMixup,
    Conventional,
    PositiveLearning,
    NegativeLearning,
}

/// Embeddings and classifier weights are both parameters; λ and the pairs
/// are fixed per instance.
fn mixup_case(rng: &mut Pcg64, loss: Loss) -> f64 {
    let n = rng.random_range(3..8);
    let d = rng.random_range(2..5);
    let c = rng.random_range(2..4);
    let h = random_matrix(rng, n, d, 1.0);
    let w = random_matrix(rng, d, c + 1, 1.0);
    let m = rng.random_range(1..5);
    let cands: Vec<usize> = (0..m).map(|_| rng.random_range(0..n)).collect();
    let partners: Vec<usize> = (0..m).map(|_| rng.random_range(0..n)).collect();
    let lambdas: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..0.95)).collect();
    let classes: Vec<usize> = (0..m).map(|_| rng.random_range(0..c)).collect();
    grad_check(&[h, w], move |t, v| {
        let sign = match loss {
            Loss::IdMixup | Loss::Conventional => MixSign::Positive,
            _ => MixSign::Negative,
        };
        let mixed = mix_on_tape(t, v[0], &cands, &partners, &lambdas, sign)?;
        let (_, p) = classify_on_tape(t, mixed, &ClassifierVars { weight: v[1], bias: None })?;
        match loss {
            Loss::IdMixup => {
                let mut y = Matrix::zeros(m, c + 1);
                for r in 0..m {
                    let yc = classes[r];
                    let yp = classes[(r + 1) % m];
                    y.set(r, yc, y.get(r, yc) + lambdas[r]);
                    y.set(r, yp, y.get(r, yp) + 1.0 - lambdas[r]);
                }
                soft_cross_entropy_on_tape(t, p, &y)
            }
            Loss::Conventional => conventional_ood_on_tape(t, p, &lambdas, &classes),
            Loss::PositiveLearning => positive_learning_on_tape(t, p, &lambdas),
            Loss::NegativeLearning => negative_learning_on_tape(t, p, &lambdas, &classes),
        }
    })
}

fn gcl_case(rng: &mut Pcg64, node_level: bool) -> f64 {
    let n = rng.random_range(4..9);
    let layers = rng.random_range(2..4);
    let classes = rng.random_range(2..4);
    let d = rng.random_range(2..4);
    let inputs: Vec<Matrix> = (0..layers).map(|_| random_matrix(rng, n, d, 1.0)).collect();
    // first two nodes guarantee two present classes
    let labels: Vec<usize> = (0..n).map(|i| if i < 2 { i } else { rng.random_range(0..classes) }).collect();
    let pivot = rng.random_range(0..layers);
    let tau = rng.random_range(0.5..2.0);
    let norm = if rng.random_bool(0.5) { PairNorm::Layers } else { PairNorm::Pairs };
    grad_check(&inputs, move |t, v| {
        let protos = prototypes_on_tape(t, v, &labels, classes)?;
        let out = if node_level {
            n2p_on_tape(t, v, &protos, &labels, pivot, tau, norm)?
        } else {
            p2p_on_tape(t, &protos, pivot, tau, norm)?
        };
        Ok(out.expect("two classes are present"))
    })
}

/// The whole per-epoch objective through `epoch_gradients`, differentiated
/// numerically over every parameter entry.
///
/// Candidate selection and pseudo-labels are discrete, so the objective is
/// only piecewise smooth; exact distance ties between candidates are common
/// on graphs this small. A coordinate that sits on a jump (no step gives a
/// stable difference) is left out. At most a tenth of the coordinates may be
/// dropped; an instance whose base point sits on a tie (most coordinates
/// jump) is replaced by a fresh draw.
fn epoch_objective(rng: &mut Pcg64) -> f64 {
    for _ in 0..10 {
        if let Some(e) = epoch_objective_once(rng) {
            return e;
        }
    }
    panic!("no smooth epoch instance in 10 draws");
}

fn epoch_objective_once(rng: &mut Pcg64) -> Option<f64> {
    let g = tiny_graph(rng);
    let seed = rng.random_range(0..1000u64);
    let split = make_openset_split(&g, 2, seed).unwrap();
    let cfg = TrainConfig { heads: 1, embed_dim: 3, seed, ..TrainConfig::default() };
    let dims = model_dims(&g, &split, &cfg);
    let params = ModelParams::init(dims, &mut negmix::rng::stream(seed, "init")).unwrap();
    let epoch = rng.random_range(0..5);
    let (_, grads) = epoch_gradients(&g, &split, &cfg, &params, epoch).unwrap();

    let mut err = RelErr::default();
    let (mut seen, mut jumps) = (0usize, 0usize);
    for k in 0..params.named_tensors().len() {
        for idx in 0..grads[k].as_slice().len() {
            let at = |h: f64| {
                let mut p = params.clone();
                p.tensors_mut()[k].as_mut_slice()[idx] += h;
                epoch_gradients(&g, &split, &cfg, &p, epoch).unwrap().0.total
            };
            seen += 1;
            match central_difference(at) {
                Some(d) => err.push(grads[k].as_slice()[idx], d),
                None => jumps += 1,
            }
        }
    }
    (jumps * 10 <= seen).then_some(err.worst)
}

/// Every case, ops first, then loss terms, then the full epoch objective.
pub fn all() -> Vec<(&'static str, Case)> {
    let mut v = op_cases();
    v.extend(loss_cases());
    v.push(("epoch_objective", epoch_objective));
    v
}
