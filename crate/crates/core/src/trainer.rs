//! Full-batch training loop, Adam, validation-based model selection and
//! evaluation.
//!
//! Each epoch minimizes
//! `L_ce + γ L_oreg + η L_pi + δ L_po + β (L_p2p + L_n2p)`
//! where `L_pi` is the Mixup loss of potential-ID nodes and `L_po` the
//! positive plus negative learning loss of mixed potential-OOD nodes.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::RngExt;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::checkpoint::Checkpoint;
use crate::config::TrainConfig;
use crate::encoder::{
    classify_on_tape, cross_entropy_loss, cross_entropy_on_tape, encode_on_tape, AttentionIndex, ModelDims,
    ModelParams,
};
use crate::error::{invalid, Error, Result};
use crate::gcl::{n2p_on_tape, p2p_on_tape, prototypes_on_tape};
use crate::graph::{Graph, OpenSetSplit};
use crate::io::write_atomic;
use crate::metrics::{eval_report, EvalReport};
use crate::mixup::{
    conventional_ood_on_tape, mix_on_tape, negative_learning_on_tape, positive_learning_on_tape, sample_partners,
    soft_cross_entropy_on_tape, LambdaSampler, MixSign,
};
use crate::ood::{ood_regularization_on_tape, ood_score_on_tape, select_candidates, NeighborIndex, OodScoreVector};
use crate::rng::{self, Pcg64};
use crate::tensor::{argmax, Matrix};

/// Adam with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    t: i32,
    m: Vec<Matrix>,
    v: Vec<Matrix>,
}

impl Adam {
    pub fn new(params: &ModelParams, lr: f64, weight_decay: f64) -> Self {
        let zeros: Vec<Matrix> =
            params.named_tensors().iter().map(|(_, m)| Matrix::zeros(m.rows(), m.cols())).collect();
        Self { lr, weight_decay, beta1: 0.9, beta2: 0.999, eps: 1e-8, t: 0, m: zeros.clone(), v: zeros }
    }

    /// One update; `grads` follow the order of [`ModelParams::tensors_mut`].
    pub fn step(&mut self, params: &mut ModelParams, grads: &[Matrix]) -> Result<()> {
        let tensors = params.tensors_mut();
        if tensors.len() != grads.len() || grads.len() != self.m.len() {
            return Err(invalid("gradient count does not match parameters"));
        }
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (((p, g), m), v) in tensors.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            if p.shape() != g.shape() {
                return Err(Error::Shape { op: "adam", lhs: p.shape(), rhs: g.shape() });
            }
            let it = p.as_mut_slice().iter_mut().zip(g.as_slice()).zip(m.as_mut_slice()).zip(v.as_mut_slice());
            for (((w, &gi), mi), vi) in it {
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gi;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gi * gi;
                let update = (*mi / c1) / ((*vi / c2).sqrt() + self.eps);
                *w -= self.lr * (update + self.weight_decay * *w);
            }
        }
        Ok(())
    }
}

/// Loss terms of one epoch. Skipped terms are `None` and contribute 0.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub ce: f64,
    pub oreg: Option<f64>,
    pub pi: Option<f64>,
    pub po: Option<f64>,
    pub gcl: Option<f64>,
    pub total: f64,
    /// Cross-entropy on the validation nodes, before this epoch's update.
    pub val_loss: f64,
    pub n_ood_candidates: usize,
    pub n_id_candidates: usize,
    pub pivot: Option<usize>,
}

impl EpochStats {
    /// `ce + γ oreg + η pi + δ po + β gcl` under `cfg`.
    pub fn weighted_total(&self, cfg: &TrainConfig) -> f64 {
        let t = |v: Option<f64>, w: f64| v.map_or(0.0, |v| w * v);
        self.ce + t(self.oreg, cfg.gamma) + t(self.pi, cfg.eta) + t(self.po, cfg.delta) + t(self.gcl, cfg.beta)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub best: Checkpoint,
    pub history: Vec<EpochStats>,
    pub last: ModelParams,
    pub wall_seconds: f64,
}

impl TrainOutcome {
    pub fn epochs_to_best(&self) -> usize {
        self.best.epoch + 1
    }
}

pub fn model_dims(graph: &Graph, split: &OpenSetSplit, cfg: &TrainConfig) -> ModelDims {
    ModelDims {
        in_dim: graph.num_features(),
        heads: cfg.heads,
        layers: cfg.layers,
        embed_dim: cfg.embed_dim,
        num_outputs: split.num_known() + 1,
        bias: cfg.classifier_bias,
    }
}

/// Which optional terms are switched on for a given epoch.
struct Plan {
    oreg: bool,
    pi: bool,
    po: bool,
    gcl: bool,
}

impl Plan {
    fn new(cfg: &TrainConfig, epoch: usize) -> Self {
        let a = &cfg.ablation;
        let mixing = epoch >= cfg.warmup_epochs;
        let po_any = a.selected_ood_no_mixup || a.conventional_ood_mixup || !(a.no_pos_learning && a.no_neg_learning);
        Self {
            oreg: cfg.gamma > 0.0 && !a.no_oreg,
            pi: mixing && cfg.eta > 0.0 && !a.no_pos_mixup,
            po: mixing && cfg.delta > 0.0 && po_any,
            gcl: cfg.beta > 0.0 && !a.no_gcl && cfg.layers >= 2,
        }
    }
}

fn add_opt(tape: &mut Tape, acc: Option<Var>, v: Option<Var>) -> Result<Option<Var>> {
    Ok(match (acc, v) {
        (Some(a), Some(b)) => Some(tape.add(a, b)?),
        (a, b) => a.or(b),
    })
}

/// Everything the loop needs that does not change between epochs.
struct Context<'a> {
    graph: &'a Graph,
    split: &'a OpenSetSplit,
    cfg: &'a TrainConfig,
    attention: AttentionIndex,
    neighbors: NeighborIndex,
    train: Vec<usize>,
    val: Vec<usize>,
    unlabeled: Vec<usize>,
    lambdas: LambdaSampler,
}

struct EpochResult {
    stats: EpochStats,
    grads: Vec<Matrix>,
}

fn run_epoch(ctx: &Context, params: &ModelParams, epoch: usize, rng: &mut Pcg64) -> Result<EpochResult> {
    let cfg = ctx.cfg;
    let labels = &ctx.split.remapped_labels;
    let c = ctx.split.num_known();
    let plan = Plan::new(cfg, epoch);

    let mut tape = Tape::new();
    let vars = params.to_tape(&mut tape, true);
    let x = tape.constant(ctx.graph.features().clone());
    let enc = encode_on_tape(&mut tape, &ctx.attention, x, &vars)?;
    let (_, probs) = classify_on_tape(&mut tape, enc.concat, &vars.classifier)?;
    let ce = cross_entropy_on_tape(&mut tape, probs, &ctx.train, labels)?;

    let probs_now = tape.value(probs).clone();
    let val_loss = if ctx.val.is_empty() {
        tape.value(ce).item()
    } else {
        let mut mask = vec![false; labels.len()];
        ctx.val.iter().for_each(|&i| mask[i] = true);
        cross_entropy_loss(&probs_now, labels, &mask)?
    };

    let ood = ood_score_on_tape(&mut tape, probs, &ctx.neighbors, cfg.entropy_mode)?;
    let scores_now = tape.value(ood.scores).as_slice().to_vec();
    let cands = select_candidates(&scores_now, &probs_now, &ctx.unlabeled, cfg.rho_percent, cfg.selection())?;

    let oreg = if plan.oreg { ood_regularization_on_tape(&mut tape, ood.scores, &ctx.train, &cands.ood)? } else { None };

    let pi = if plan.pi && !cands.id.is_empty() {
        let n = cands.id.len();
        let partners = sample_partners(rng, &ctx.train, n);
        let lam: Vec<f64> = (0..n).map(|_| ctx.lambdas.sample(rng)).collect();
        let mixed = mix_on_tape(&mut tape, enc.concat, &cands.id, &partners, &lam, MixSign::Positive)?;
        let (_, pm) = classify_on_tape(&mut tape, mixed, &vars.classifier)?;
        let mut targets = Matrix::zeros(n, c + 1);
        for r in 0..n {
            let (a, b) = (cands.id_labels[r], labels[partners[r]]);
            targets.set(r, a, targets.get(r, a) + lam[r]);
            targets.set(r, b, targets.get(r, b) + 1.0 - lam[r]);
        }
        Some(soft_cross_entropy_on_tape(&mut tape, pm, &targets)?)
    } else {
        None
    };

    let po = if plan.po && !cands.ood.is_empty() {
        let a = &cfg.ablation;
        let n = cands.ood.len();
        if a.selected_ood_no_mixup {
            let p = tape.gather_rows(probs, cands.ood.as_slice().into())?;
            Some(positive_learning_on_tape(&mut tape, p, &vec![1.0; n])?)
        } else {
            let partners = sample_partners(rng, &ctx.train, n);
            let lam: Vec<f64> = (0..n).map(|_| ctx.lambdas.sample(rng)).collect();
            let ys: Vec<usize> = partners.iter().map(|&j| labels[j]).collect();
            let sign = if a.conventional_ood_mixup { MixSign::Positive } else { MixSign::Negative };
            let mixed = mix_on_tape(&mut tape, enc.concat, &cands.ood, &partners, &lam, sign)?;
            let (_, pm) = classify_on_tape(&mut tape, mixed, &vars.classifier)?;
            if a.conventional_ood_mixup {
                Some(conventional_ood_on_tape(&mut tape, pm, &lam, &ys)?)
            } else {
                let pos = if a.no_pos_learning { None } else { Some(positive_learning_on_tape(&mut tape, pm, &lam)?) };
                let neg =
                    if a.no_neg_learning { None } else { Some(negative_learning_on_tape(&mut tape, pm, &lam, &ys)?) };
                add_opt(&mut tape, pos, neg)?
            }
        }
    } else {
        None
    };

    let (gcl, pivot) = if plan.gcl {
        let pivot = rng.random_range(0..cfg.layers);
        let eff: Vec<usize> = (0..labels.len())
            .map(|i| if ctx.split.train_mask[i] { labels[i] } else { argmax(probs_now.row(i)) })
            .collect();
        let protos = prototypes_on_tape(&mut tape, &enc.layers, &eff, c + 1)?;
        let p2p = p2p_on_tape(&mut tape, &protos, pivot, cfg.tau, cfg.gcl_pair_norm)?;
        let n2p = n2p_on_tape(&mut tape, &enc.layers, &protos, &eff, pivot, cfg.tau, cfg.gcl_pair_norm)?;
        (add_opt(&mut tape, p2p, n2p)?, Some(pivot))
    } else {
        (None, None)
    };

    let mut total = ce;
    for (term, w) in [(oreg, cfg.gamma), (pi, cfg.eta), (po, cfg.delta), (gcl, cfg.beta)] {
        if let Some(t) = term {
            let s = tape.scale(t, w);
            total = tape.add(total, s)?;
        }
    }
    let total_value = tape.value(total).item();
    if !total_value.is_finite() {
        return Err(Error::Diverged { epoch, value: total_value });
    }
    tape.backward(total)?;
    let grads = vars
        .all()
        .into_iter()
        .map(|v| tape.grad(v).cloned().unwrap_or_else(|| Matrix::zeros(tape.shape(v).0, tape.shape(v).1)))
        .collect();

    let val = |v: Option<Var>| v.map(|v| tape.value(v).item());
    let stats = EpochStats {
        epoch,
        ce: tape.value(ce).item(),
        oreg: val(oreg),
        pi: val(pi),
        po: val(po),
        gcl: val(gcl),
        total: total_value,
        val_loss,
        n_ood_candidates: cands.ood.len(),
        n_id_candidates: cands.id.len(),
        pivot,
    };
    Ok(EpochResult { stats, grads })
}

/// Gradients of one epoch's objective at `params`, in
/// [`ModelParams::tensors_mut`] order, together with the epoch's stats.
pub fn epoch_gradients(
    graph: &Graph,
    split: &OpenSetSplit,
    cfg: &TrainConfig,
    params: &ModelParams,
    epoch: usize,
) -> Result<(EpochStats, Vec<Matrix>)> {
    let ctx = Context::new(graph, split, cfg)?;
    let r = run_epoch(&ctx, params, epoch, &mut rng::stream(cfg.seed, "train"))?;
    Ok((r.stats, r.grads))
}

impl<'a> Context<'a> {
    fn new(graph: &'a Graph, split: &'a OpenSetSplit, cfg: &'a TrainConfig) -> Result<Self> {
        cfg.validate()?;
        if split.num_nodes() != graph.num_nodes() {
            return Err(invalid("split and graph node counts differ"));
        }
        let train = split.train_nodes();
        if train.is_empty() {
            return Err(invalid("no training nodes"));
        }
        Ok(Self {
            graph,
            split,
            cfg,
            attention: AttentionIndex::new(graph),
            neighbors: NeighborIndex::new(graph),
            train,
            val: split.val_nodes(),
            unlabeled: split.test_nodes(),
            lambdas: LambdaSampler::new(cfg.beta_alpha)?,
        })
    }
}

/// Train from a seeded initialization and keep the parameters with the
/// lowest validation cross-entropy.
pub fn train(graph: &Graph, split: &OpenSetSplit, cfg: &TrainConfig) -> Result<TrainOutcome> {
    let dims = model_dims(graph, split, cfg);
    let params = ModelParams::init(dims, &mut rng::stream(cfg.seed, "init"))?;
    train_from(graph, split, cfg, params)
}

/// As [`train`], starting from the given parameters.
pub fn train_from(graph: &Graph, split: &OpenSetSplit, cfg: &TrainConfig, mut params: ModelParams) -> Result<TrainOutcome> {
    let start = Instant::now();
    let ctx = Context::new(graph, split, cfg)?;
    if params.dims() != model_dims(graph, split, cfg) {
        return Err(invalid("initial parameters do not match the config dims"));
    }
    let mut rng = rng::stream(cfg.seed, "train");
    let mut adam = Adam::new(&params, cfg.learning_rate, cfg.weight_decay);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<Checkpoint> = None;

    for epoch in 0..cfg.epochs {
        let r = run_epoch(&ctx, &params, epoch, &mut rng)?;
        if best.as_ref().is_none_or(|b| r.stats.val_loss < b.val_loss) {
            best = Some(Checkpoint::from_params(&params, epoch, r.stats.val_loss));
        }
        log::debug!(
            "epoch {epoch}: total {:.5} ce {:.5} val {:.5} |V_PO| {} |V_PI| {}",
            r.stats.total,
            r.stats.ce,
            r.stats.val_loss,
            r.stats.n_ood_candidates,
            r.stats.n_id_candidates
        );
        history.push(r.stats);
        adam.step(&mut params, &r.grads)?;
    }
    let best = best.expect("at least one epoch");
    log::info!("best validation loss {:.5} at epoch {}", best.val_loss, best.epoch + 1);
    Ok(TrainOutcome { best, history, last: params, wall_seconds: start.elapsed().as_secs_f64() })
}

/// Predictions, scores and embeddings of a trained model.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: EvalReport,
    pub predictions: Vec<usize>,
    pub probs: Matrix,
    pub scores: OodScoreVector,
    pub embeddings: Matrix,
}

pub fn evaluate(ck: &Checkpoint, graph: &Graph, split: &OpenSetSplit, cfg: &TrainConfig) -> Result<Evaluation> {
    let params = ck.to_params()?;
    evaluate_params(&params, graph, split, cfg)
}

pub fn evaluate_params(params: &ModelParams, graph: &Graph, split: &OpenSetSplit, cfg: &TrainConfig) -> Result<Evaluation> {
    let dims = params.dims();
    if dims.in_dim != graph.num_features() || dims.num_outputs != split.num_known() + 1 {
        return Err(invalid(format!(
            "checkpoint dims {dims:?} do not fit {} features and {} known classes",
            graph.num_features(),
            split.num_known()
        )));
    }
    let emb = crate::encoder::encode(graph, params)?;
    let probs = crate::encoder::classify(&emb.concat, &params.classifier)?;
    let predictions = crate::encoder::predict(&probs);
    let scores = crate::ood::ood_score(graph, &probs, cfg.entropy_mode)?;
    let report = eval_report(
        &predictions,
        &split.remapped_labels,
        &split.test_mask,
        &scores.scores,
        &scores.p_unknown,
        split.num_known() + 1,
        cfg.score_kind,
    )?;
    Ok(Evaluation { report, predictions, probs, scores, embeddings: emb.concat })
}

impl Evaluation {
    /// `node_id,e0,e1,...` for every node.
    pub fn embeddings_csv(&self) -> String {
        let mut s = String::from("node_id");
        for k in 0..self.embeddings.cols() {
            let _ = write!(s, ",e{k}");
        }
        s.push('\n');
        for i in 0..self.embeddings.rows() {
            let _ = write!(s, "{i}");
            for v in self.embeddings.row(i) {
                let _ = write!(s, ",{v}");
            }
            s.push('\n');
        }
        s
    }

    /// `node_id,score,is_ood_ground_truth` for the test nodes.
    pub fn ood_scores_csv(&self, split: &OpenSetSplit) -> String {
        let mut s = String::from("node_id,score,is_ood_ground_truth\n");
        for i in split.test_nodes() {
            let _ = writeln!(s, "{i},{},{}", self.scores.scores[i], u8::from(split.is_ood(i)));
        }
        s
    }

    pub fn write_exports(&self, split: &OpenSetSplit, dir: &Path) -> Result<()> {
        write_atomic(&dir.join("embeddings.csv"), self.embeddings_csv().as_bytes())?;
        write_atomic(&dir.join("ood_scores.csv"), self.ood_scores_csv(split).as_bytes())
    }
}
