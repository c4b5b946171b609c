//! The `negmix` command line.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};
use rayon::prelude::*;

use negmix::checkpoint::Checkpoint;
use negmix::config::{AblationVariant, TrainConfig};
use negmix::graph::{default_id_classes, load_graph, make_openset_split_with, synth_sbm, write_graph, Graph, OpenSetSplit, SbmParams, SplitRatios};
use negmix::io::write_atomic;
use negmix::metrics::ScoreKind;
use negmix::theorem::{run_suite, DEFAULT_EPSILON};
use negmix::trainer::{evaluate, train, EpochStats};
use negmix::{io, rng};

#[derive(Debug, Parser)]
#[command(name = "negmix", version, about = "Open-set node classification with negative Mixup")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train one model per seed; writes checkpoints, epoch logs and results.csv.
    Train(TrainArgs),
    /// Evaluate a checkpoint; writes report.json and optional CSV exports.
    Eval(EvalArgs),
    /// Build an open-set split and write its masks as JSON.
    Split(SplitArgs),
    /// Write a stochastic block model dataset directory.
    Synth(SynthArgs),
    /// Train every ablation variant; one results row per variant and seed.
    Ablate(AblateArgs),
    /// Vary one hyper-parameter over a list of values.
    Sweep(SweepArgs),
    /// Check the gradient sign patterns of positive and negative Mixup.
    VerifyTheorems(TheoremArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ScoreArg {
    Oodscore,
    Punknown,
}

impl From<ScoreArg> for ScoreKind {
    fn from(s: ScoreArg) -> Self {
        match s {
            ScoreArg::Oodscore => ScoreKind::OodScore,
            ScoreArg::Punknown => ScoreKind::PUnknown,
        }
    }
}

/// Dataset and configuration shared by the training commands.
#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Dataset directory (manifest.json, edges.tsv, features.csv, labels.csv).
    #[arg(long)]
    pub dataset: PathBuf,
    /// Hyper-parameter preset.
    #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(negmix::config::PRESET_NAMES))]
    pub preset: Option<String>,
    /// JSON config applied on top of the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Single seed (split, initialization and sampling).
    #[arg(long, conflicts_with = "seeds")]
    pub seed: Option<u64>,
    /// Comma-separated seeds, one run each.
    #[arg(long, value_delimiter = ',')]
    pub seeds: Vec<u64>,
    /// Output directory.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    /// Concurrent runs.
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
    /// Detection score used for AUROC and FPR@95.
    #[arg(long, value_enum)]
    pub score: Option<ScoreArg>,
    /// Override the number of epochs.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Number of known classes (default: first half, rounded up).
    #[arg(long)]
    pub id_classes: Option<usize>,
}

#[derive(Debug, Clone, Copy, Default, Args)]
pub struct AblationFlags {
    /// Drop positive Mixup of potential-ID nodes.
    #[arg(long)]
    pub no_pos_mixup: bool,
    /// Mix potential-OOD nodes positively (conventional Mixup).
    #[arg(long)]
    pub conventional_ood_mixup: bool,
    /// Train potential-OOD nodes as unknown without mixing.
    #[arg(long)]
    pub selected_ood_no_mixup: bool,
    /// Drop the positive learning loss.
    #[arg(long)]
    pub no_pos_learning: bool,
    /// Drop the negative learning loss.
    #[arg(long)]
    pub no_neg_learning: bool,
    /// Drop cross-layer contrastive learning.
    #[arg(long)]
    pub no_gcl: bool,
    /// Drop OOD score regularization.
    #[arg(long)]
    pub no_oreg: bool,
    /// Rank by score without clustering first.
    #[arg(long)]
    pub no_clustering_then_ranking: bool,
}

impl AblationFlags {
    fn variants(&self) -> Vec<AblationVariant> {
        use AblationVariant::*;
        [
            (self.no_pos_mixup, NoPosMixup),
            (self.conventional_ood_mixup, ConventionalOodMixup),
            (self.selected_ood_no_mixup, SelectedOodNoMixup),
            (self.no_pos_learning, NoPosLearning),
            (self.no_neg_learning, NoNegLearning),
            (self.no_gcl, NoGcl),
            (self.no_oreg, NoOreg),
            (self.no_clustering_then_ranking, NoClusteringThenRanking),
        ]
        .into_iter()
        .filter_map(|(on, v)| on.then_some(v))
        .collect()
    }

    fn apply(&self, cfg: &mut TrainConfig) {
        let a = &mut cfg.ablation;
        a.no_pos_mixup |= self.no_pos_mixup;
        a.conventional_ood_mixup |= self.conventional_ood_mixup;
        a.selected_ood_no_mixup |= self.selected_ood_no_mixup;
        a.no_pos_learning |= self.no_pos_learning;
        a.no_neg_learning |= self.no_neg_learning;
        a.no_gcl |= self.no_gcl;
        a.no_oreg |= self.no_oreg;
        a.no_clustering_then_ranking |= self.no_clustering_then_ranking;
    }
}

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub ablation: AblationFlags,
    /// Also write embeddings.csv and ood_scores.csv per seed.
    #[arg(long)]
    pub export: bool,
}

#[derive(Debug, Clone, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Checkpoint written by `train`.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Masks JSON written by `split`; by default the split is rebuilt from the seed.
    #[arg(long)]
    pub split: Option<PathBuf>,
    /// Also write embeddings.csv and ood_scores.csv.
    #[arg(long)]
    pub export: bool,
}

#[derive(Debug, Clone, Args)]
pub struct SplitArgs {
    #[arg(long)]
    pub dataset: PathBuf,
    /// Number of known classes (default: first half, rounded up).
    #[arg(long)]
    pub id_classes: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Percent of ID nodes used for training.
    #[arg(long, default_value_t = 10.0)]
    pub train_pct: f64,
    /// Percent of ID nodes used for validation.
    #[arg(long, default_value_t = 10.0)]
    pub val_pct: f64,
    /// Output file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    /// Output dataset directory.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 60)]
    pub n_per_class: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 0.3)]
    pub p_in: f64,
    #[arg(long, default_value_t = 0.01)]
    pub p_out: f64,
    #[arg(long, default_value_t = 16)]
    pub feat_dim: usize,
    #[arg(long, default_value_t = 3.0)]
    pub feat_shift: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

#[derive(Debug, Clone, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    /// Restrict to the selected variants (the full model is always run).
    #[command(flatten)]
    pub only: AblationFlags,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
#[value(rename_all = "snake_case")]
pub enum SweepParam {
    TrainRatio,
    IdClasses,
    Rho,
    Layers,
    Gamma,
    Eta,
    Delta,
    Beta,
}

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    /// Parameter to vary.
    #[arg(long, value_enum)]
    pub param: SweepParam,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, Args)]
pub struct TheoremArgs {
    /// Random instances per class count.
    #[arg(long, default_value_t = 100)]
    pub instances: usize,
    /// Comma-separated class counts (C+1).
    #[arg(long, value_delimiter = ',', default_values_t = [3usize, 5, 11])]
    pub classes: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_EPSILON)]
    pub epsilon: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

/// How a command finished, when it did not fail outright.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Outcome {
    Success,
    TheoremFailure,
}

pub const RESULTS_HEADER: &str = "seed,dataset,accuracy,macro_f1,auroc,fpr95,epochs_to_best,wall_seconds";

/// Parse `argv` (including the program name) and run; returns the exit code.
pub fn run_from<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match run(cli) {
        Ok(Outcome::Success) => 0,
        Ok(Outcome::TheoremFailure) => 2,
        Err(e) => {
            eprintln!("error: {e:#}");
            1
        }
    }
}

pub fn run(cli: Cli) -> Result<Outcome> {
    match cli.command {
        Command::Train(a) => cmd_train(&a).map(|_| Outcome::Success),
        Command::Eval(a) => cmd_eval(&a).map(|_| Outcome::Success),
        Command::Split(a) => cmd_split(&a).map(|_| Outcome::Success),
        Command::Synth(a) => cmd_synth(&a).map(|_| Outcome::Success),
        Command::Ablate(a) => cmd_ablate(&a).map(|_| Outcome::Success),
        Command::Sweep(a) => cmd_sweep(&a).map(|_| Outcome::Success),
        Command::VerifyTheorems(a) => cmd_theorems(&a),
    }
}

fn base_config(c: &Common) -> Result<TrainConfig> {
    let mut cfg = match &c.preset {
        Some(p) => TrainConfig::preset(p)?,
        None => TrainConfig::default(),
    };
    if let Some(path) = &c.config {
        let text = io::read_to_string(path)?;
        cfg = cfg.merged_with_json(&text).with_context(|| format!("config {}", path.display()))?;
    }
    if let Some(e) = c.epochs {
        cfg.epochs = e;
    }
    if let Some(k) = c.id_classes {
        cfg.id_classes = Some(k);
    }
    if let Some(s) = c.score {
        cfg.score_kind = s.into();
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn seeds(c: &Common, cfg: &TrainConfig) -> Vec<u64> {
    if c.seeds.is_empty() {
        vec![cfg.seed]
    } else {
        c.seeds.clone()
    }
}

fn dataset_name(c: &Common) -> String {
    c.dataset
        .file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_else(|| c.dataset.display().to_string())
}

fn make_split(graph: &Graph, cfg: &TrainConfig) -> Result<OpenSetSplit> {
    let k = cfg.id_classes.unwrap_or_else(|| default_id_classes(graph.num_classes()));
    Ok(make_openset_split_with(graph, k, cfg.split, cfg.seed)?)
}

fn pool(jobs: usize) -> Result<rayon::ThreadPool> {
    if jobs == 0 {
        bail!("--jobs must be at least 1");
    }
    Ok(rayon::ThreadPoolBuilder::new().num_threads(jobs).build()?)
}

/// Metrics of one finished run.
#[derive(Debug, Clone)]
pub struct RunRow {
    pub seed: u64,
    pub accuracy: f64,
    pub macro_f1: f64,
    pub auroc: f64,
    pub fpr95: f64,
    pub epochs_to_best: usize,
    pub wall_seconds: f64,
}

impl RunRow {
    fn csv(&self, dataset: &str) -> String {
        format!(
            "{},{},{},{},{},{},{},{:.3}",
            self.seed, dataset, self.accuracy, self.macro_f1, self.auroc, self.fpr95, self.epochs_to_best, self.wall_seconds
        )
    }
}

fn epochs_csv(history: &[EpochStats]) -> String {
    let mut s = String::from("epoch,ce,oreg,pi,po,gcl,total,val_loss,n_ood_candidates,n_id_candidates\n");
    let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    for h in history {
        let _ = writeln!(
            s,
            "{},{},{},{},{},{},{},{},{},{}",
            h.epoch + 1,
            h.ce,
            opt(h.oreg),
            opt(h.pi),
            opt(h.po),
            opt(h.gcl),
            h.total,
            h.val_loss,
            h.n_ood_candidates,
            h.n_id_candidates
        );
    }
    s
}

/// Train and evaluate one seed; when `dir` is given, write its artifacts there.
fn train_one(graph: &Graph, cfg: &TrainConfig, dir: Option<&Path>, export: bool) -> Result<RunRow> {
    let split = make_split(graph, cfg)?;
    let out = train(graph, &split, cfg)?;
    let ev = evaluate(&out.best, graph, &split, cfg)?;
    if let Some(dir) = dir {
        std::fs::create_dir_all(dir)?;
        out.best.save(&dir.join("checkpoint.json"))?;
        write_atomic(&dir.join("epochs.csv"), epochs_csv(&out.history).as_bytes())?;
        write_atomic(&dir.join("report.json"), &serde_json::to_vec_pretty(&ev.report)?)?;
        write_atomic(&dir.join("split.json"), &serde_json::to_vec(&split)?)?;
        if export {
            ev.write_exports(&split, dir)?;
        }
    }
    Ok(RunRow {
        seed: cfg.seed,
        accuracy: ev.report.accuracy,
        macro_f1: ev.report.macro_f1,
        auroc: ev.report.auroc,
        fpr95: ev.report.fpr_at_95,
        epochs_to_best: out.epochs_to_best(),
        wall_seconds: out.wall_seconds,
    })
}

fn cmd_train(a: &TrainArgs) -> Result<()> {
    let mut cfg = base_config(&a.common)?;
    a.ablation.apply(&mut cfg);
    cfg.validate()?;
    let graph = load_graph(&a.common.dataset)?;
    let name = dataset_name(&a.common);
    let out = &a.common.out;
    std::fs::create_dir_all(out)?;
    let seeds = seeds(&a.common, &cfg);
    let rows: Vec<RunRow> = pool(a.common.jobs)?.install(|| {
        seeds
            .par_iter()
            .map(|&s| {
                let c = TrainConfig { seed: s, ..cfg.clone() };
                train_one(&graph, &c, Some(&out.join(format!("seed-{s}"))), a.export)
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let mut csv = format!("{RESULTS_HEADER}\n");
    for r in &rows {
        csv.push_str(&r.csv(&name));
        csv.push('\n');
        println!("seed {}: accuracy {:.4} macro-F1 {:.4} AUROC {:.4} FPR@95 {:.4}", r.seed, r.accuracy, r.macro_f1, r.auroc, r.fpr95);
    }
    write_atomic(&out.join("results.csv"), csv.as_bytes())?;
    write_atomic(&out.join("config.json"), &serde_json::to_vec_pretty(&cfg)?)?;
    Ok(())
}

fn cmd_eval(a: &EvalArgs) -> Result<()> {
    let cfg = base_config(&a.common)?;
    let graph = load_graph(&a.common.dataset)?;
    let split: OpenSetSplit = match &a.split {
        Some(p) => serde_json::from_str(&io::read_to_string(p)?).with_context(|| format!("split {}", p.display()))?,
        None => make_split(&graph, &cfg)?,
    };
    if split.num_nodes() != graph.num_nodes() {
        bail!("split has {} nodes, dataset has {}", split.num_nodes(), graph.num_nodes());
    }
    let ck = Checkpoint::load(&a.checkpoint)?;
    let ev = evaluate(&ck, &graph, &split, &cfg)?;
    let json = serde_json::to_vec_pretty(&ev.report)?;
    std::fs::create_dir_all(&a.common.out)?;
    write_atomic(&a.common.out.join("report.json"), &json)?;
    if a.export {
        ev.write_exports(&split, &a.common.out)?;
    }
    emit(&json);
    Ok(())
}

fn cmd_split(a: &SplitArgs) -> Result<()> {
    let graph = load_graph(&a.dataset)?;
    let k = a.id_classes.unwrap_or_else(|| default_id_classes(graph.num_classes()));
    let split = make_openset_split_with(&graph, k, SplitRatios { train_pct: a.train_pct, val_pct: a.val_pct }, a.seed)?;
    let json = serde_json::to_vec(&split)?;
    match &a.out {
        Some(p) => write_atomic(p, &json)?,
        None => emit(&json),
    }
    Ok(())
}

/// Print to stdout, tolerating a closed pipe.
fn emit(bytes: &[u8]) {
    use std::io::Write;
    let mut out = std::io::stdout().lock();
    let _ = out.write_all(bytes).and_then(|_| out.write_all(b"\n"));
}

fn cmd_synth(a: &SynthArgs) -> Result<()> {
    let p = SbmParams {
        n_per_class: a.n_per_class,
        classes: a.classes,
        p_in: a.p_in,
        p_out: a.p_out,
        feat_dim: a.feat_dim,
        feat_shift: a.feat_shift,
        seed: a.seed,
    };
    let g = synth_sbm(&p)?;
    write_graph(&g, &a.out)?;
    println!("wrote {} nodes, {} edges to {}", g.num_nodes(), g.num_edges(), a.out.display());
    Ok(())
}

/// Train every (label, config) pair for every seed; rows keep input order.
fn fan_out(graph: &Graph, jobs: usize, runs: Vec<(String, TrainConfig)>, seeds: &[u64]) -> Result<Vec<(String, RunRow)>> {
    let tasks: Vec<(String, TrainConfig)> = runs
        .into_iter()
        .flat_map(|(label, cfg)| seeds.iter().map(move |&s| (label.clone(), TrainConfig { seed: s, ..cfg.clone() })))
        .collect();
    pool(jobs)?.install(|| {
        tasks
            .par_iter()
            .map(|(label, cfg)| {
                let row = train_one(graph, cfg, None, false).with_context(|| format!("run {label} seed {}", cfg.seed))?;
                log::info!("{label} seed {}: AUROC {:.4}", cfg.seed, row.auroc);
                Ok((label.clone(), row))
            })
            .collect()
    })
}

fn cmd_ablate(a: &AblateArgs) -> Result<()> {
    let cfg = base_config(&a.common)?;
    let graph = load_graph(&a.common.dataset)?;
    let mut variants = a.only.variants();
    if variants.is_empty() {
        variants = AblationVariant::ALL.to_vec();
    } else {
        variants.insert(0, AblationVariant::Full);
    }
    let runs = variants.iter().map(|v| (v.name().to_string(), cfg.with_variant(*v))).collect();
    let rows = fan_out(&graph, a.common.jobs, runs, &seeds(&a.common, &cfg))?;
    let name = dataset_name(&a.common);
    let mut csv = format!("variant,{RESULTS_HEADER}\n");
    for (label, r) in &rows {
        let _ = writeln!(csv, "{label},{}", r.csv(&name));
    }
    std::fs::create_dir_all(&a.common.out)?;
    write_atomic(&a.common.out.join("results.csv"), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

fn sweep_config(base: &TrainConfig, p: SweepParam, v: f64) -> Result<TrainConfig> {
    let mut c = base.clone();
    let count = |v: f64| -> Result<usize> {
        if v >= 1.0 && v.fract() == 0.0 {
            Ok(v as usize)
        } else {
            bail!("expected a positive integer, got {v}")
        }
    };
    match p {
        SweepParam::TrainRatio => c.split.train_pct = v,
        SweepParam::IdClasses => c.id_classes = Some(count(v)?),
        SweepParam::Rho => c.rho_percent = v,
        SweepParam::Layers => c.layers = count(v)?,
        SweepParam::Gamma => c.gamma = v,
        SweepParam::Eta => c.eta = v,
        SweepParam::Delta => c.delta = v,
        SweepParam::Beta => c.beta = v,
    }
    if c.split.train_pct + c.split.val_pct > 100.0 {
        c.split.val_pct = 100.0 - c.split.train_pct;
    }
    c.validate()?;
    Ok(c)
}

fn cmd_sweep(a: &SweepArgs) -> Result<()> {
    let cfg = base_config(&a.common)?;
    let graph = load_graph(&a.common.dataset)?;
    let runs = a
        .values
        .iter()
        .map(|&v| Ok((v.to_string(), sweep_config(&cfg, a.param, v)?)))
        .collect::<Result<Vec<_>>>()?;
    let rows = fan_out(&graph, a.common.jobs, runs, &seeds(&a.common, &cfg))?;
    let param = a.param.to_possible_value().expect("named").get_name().to_string();
    let name = dataset_name(&a.common);
    let mut csv = format!("param,value,{RESULTS_HEADER}\n");
    for (value, r) in &rows {
        let _ = writeln!(csv, "{param},{value},{}", r.csv(&name));
    }
    std::fs::create_dir_all(&a.common.out)?;
    write_atomic(&a.common.out.join("sweep.csv"), csv.as_bytes())?;
    print!("{csv}");
    Ok(())
}

fn cmd_theorems(a: &TheoremArgs) -> Result<Outcome> {
    if a.classes.iter().any(|&c| c < 3) {
        bail!("class counts must be at least 3");
    }
    if !(a.epsilon > 0.0 && a.epsilon <= 1e-4) {
        bail!("epsilon must be in (0, 1e-4]");
    }
    let mut r = rng::stream(a.seed, "verify-theorems");
    println!("{:>8} {:>10} {:>10} {:>10} {:>12} {:>9}", "classes", "instances", "theorem1", "theorem2", "closed_form", "halving");
    let mut ok = true;
    for &c in &a.classes {
        let s = run_suite(&mut r, &[c], a.instances, a.epsilon)?;
        let cell = |fails: usize| if fails == 0 { "ok".to_string() } else { format!("{fails} FAIL") };
        println!(
            "{:>8} {:>10} {:>10} {:>10} {:>12} {:>9}",
            c,
            s.instances,
            cell(s.theorem1_failures),
            cell(s.theorem2_failures),
            cell(s.closed_form_failures),
            cell(s.halving_failures)
        );
        ok &= s.passed();
    }
    Ok(if ok { Outcome::Success } else { Outcome::TheoremFailure })
}
