//! Training configuration, per-dataset presets and ablation variants.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{invalid, Result};
use crate::gcl::PairNorm;
use crate::graph::SplitRatios;
use crate::metrics::ScoreKind;
use crate::ood::{EntropyMode, Selection};

/// Switches that remove or replace parts of the objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Ablation {
    /// Drop positive Mixup of ID candidates.
    pub no_pos_mixup: bool,
    /// Mix OOD candidates positively and train with soft cross-entropy.
    pub conventional_ood_mixup: bool,
    /// Train OOD candidates directly towards the unknown class, without mixing.
    pub selected_ood_no_mixup: bool,
    pub no_pos_learning: bool,
    pub no_neg_learning: bool,
    pub no_gcl: bool,
    pub no_oreg: bool,
    /// Rank by score only instead of clustering first.
    pub no_clustering_then_ranking: bool,
}

/// Named ablation variants, one per row of the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationVariant {
    Full,
    NoPosMixup,
    ConventionalOodMixup,
    SelectedOodNoMixup,
    NoPosLearning,
    NoNegLearning,
    NoGcl,
    NoOreg,
    NoClusteringThenRanking,
}

impl AblationVariant {
    pub const ALL: [AblationVariant; 9] = [
        AblationVariant::Full,
        AblationVariant::NoPosMixup,
        AblationVariant::ConventionalOodMixup,
        AblationVariant::SelectedOodNoMixup,
        AblationVariant::NoPosLearning,
        AblationVariant::NoNegLearning,
        AblationVariant::NoGcl,
        AblationVariant::NoOreg,
        AblationVariant::NoClusteringThenRanking,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AblationVariant::Full => "full",
            AblationVariant::NoPosMixup => "no_pos_mixup",
            AblationVariant::ConventionalOodMixup => "conventional_ood_mixup",
            AblationVariant::SelectedOodNoMixup => "selected_ood_no_mixup",
            AblationVariant::NoPosLearning => "no_pos_learning",
            AblationVariant::NoNegLearning => "no_neg_learning",
            AblationVariant::NoGcl => "no_gcl",
            AblationVariant::NoOreg => "no_oreg",
            AblationVariant::NoClusteringThenRanking => "no_clustering_then_ranking",
        }
    }

    pub fn ablation(self) -> Ablation {
        let mut a = Ablation::default();
        match self {
            AblationVariant::Full => {}
            AblationVariant::NoPosMixup => a.no_pos_mixup = true,
            AblationVariant::ConventionalOodMixup => a.conventional_ood_mixup = true,
            AblationVariant::SelectedOodNoMixup => a.selected_ood_no_mixup = true,
            AblationVariant::NoPosLearning => a.no_pos_learning = true,
            AblationVariant::NoNegLearning => a.no_neg_learning = true,
            AblationVariant::NoGcl => a.no_gcl = true,
            AblationVariant::NoOreg => a.no_oreg = true,
            AblationVariant::NoClusteringThenRanking => a.no_clustering_then_ranking = true,
        }
        a
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub preset: Option<String>,
    /// Candidate quota, percent of unlabeled nodes per side.
    pub rho_percent: f64,
    pub heads: usize,
    pub layers: usize,
    pub embed_dim: usize,
    pub weight_decay: f64,
    pub learning_rate: f64,
    pub tau: f64,
    /// OOD score regularization weight.
    pub gamma: f64,
    /// Positive Mixup weight.
    pub eta: f64,
    /// Positive/negative learning weight.
    pub delta: f64,
    /// Contrastive loss weight.
    pub beta: f64,
    pub epochs: usize,
    pub seed: u64,
    /// Mixing coefficients are drawn from `Beta(beta_alpha, beta_alpha)`.
    pub beta_alpha: f64,
    /// Epochs before Mixup terms switch on.
    pub warmup_epochs: usize,
    pub gcl_pair_norm: PairNorm,
    pub entropy_mode: EntropyMode,
    pub classifier_bias: bool,
    pub score_kind: ScoreKind,
    /// Known classes; `None` means the first half, rounded up.
    pub id_classes: Option<usize>,
    pub split: SplitRatios,
    pub ablation: Ablation,
}

pub const PRESET_NAMES: [&str; 8] =
    ["cora", "citeseer", "pubmed", "amazon_computers", "amazon_photo", "coauthor_cs", "wikics", "arxiv"];

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            preset: None,
            rho_percent: 10.0,
            heads: 2,
            layers: 2,
            embed_dim: 16,
            weight_decay: 1e-3,
            learning_rate: 1e-2,
            tau: 1.0,
            gamma: 0.1,
            eta: 0.1,
            delta: 1.0,
            beta: 1.0,
            epochs: 1000,
            seed: 0,
            beta_alpha: 1.0,
            warmup_epochs: 0,
            gcl_pair_norm: PairNorm::Layers,
            entropy_mode: EntropyMode::Renormalized,
            classifier_bias: true,
            score_kind: ScoreKind::OodScore,
            id_classes: None,
            split: SplitRatios::default(),
            ablation: Ablation::default(),
        }
    }
}

impl TrainConfig {
    /// Hyper-parameters tuned per dataset. ρ = 10, L = 2, F′ = 16,
    /// lr = 1e-2 and τ = 1 everywhere.
    pub fn preset(name: &str) -> Result<Self> {
        // (K, wd, γ, η, δ, β)
        let (heads, wd, gamma, eta, delta, beta) = match name {
            "cora" => (2, 1e-3, 0.1, 0.1, 1.0, 1.0),
            "citeseer" => (4, 1e-3, 1.0, 0.1, 1.0, 10.0),
            "pubmed" => (4, 1e-3, 0.1, 0.1, 10.0, 10.0),
            "amazon_computers" => (2, 1e-4, 1.0, 1.0, 10.0, 10.0),
            "amazon_photo" => (2, 1e-3, 0.1, 0.1, 10.0, 1.0),
            "coauthor_cs" => (4, 1e-3, 1.0, 0.1, 10.0, 10.0),
            "wikics" => (2, 1e-3, 1.0, 0.1, 1.0, 1.0),
            "arxiv" => (4, 1e-4, 1.0, 1.0, 1.0, 0.1),
            other => {
                return Err(invalid(format!("unknown preset '{other}', expected one of {}", PRESET_NAMES.join(", "))))
            }
        };
        Ok(Self {
            preset: Some(name.to_string()),
            heads,
            weight_decay: wd,
            gamma,
            eta,
            delta,
            beta,
            ..Self::default()
        })
    }

    /// Apply the keys of a JSON object on top of `self`; unknown keys are errors.
    pub fn merged_with_json(&self, json: &str) -> Result<Self> {
        let over: Value = serde_json::from_str(json)?;
        let Value::Object(over) = over else {
            return Err(invalid("config file must hold a JSON object"));
        };
        let mut base = serde_json::to_value(self)?;
        merge(&mut base, Value::Object(over));
        let cfg: Self = serde_json::from_value(base)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn with_variant(&self, v: AblationVariant) -> Self {
        Self { ablation: v.ablation(), ..self.clone() }
    }

    pub fn selection(&self) -> Selection {
        if self.ablation.no_clustering_then_ranking {
            Selection::RankOnly
        } else {
            Selection::ClusterThenRank
        }
    }

    pub fn validate(&self) -> Result<()> {
        let weights = [("gamma", self.gamma), ("eta", self.eta), ("delta", self.delta), ("beta", self.beta)];
        for (name, w) in weights {
            if !(w >= 0.0 && w.is_finite()) {
                return Err(invalid(format!("{name} must be a finite non-negative weight, got {w}")));
            }
        }
        if self.epochs == 0 {
            return Err(invalid("epochs must be at least 1"));
        }
        if !(self.rho_percent > 0.0 && self.rho_percent <= 100.0) {
            return Err(invalid(format!("rho_percent must be in (0, 100], got {}", self.rho_percent)));
        }
        if self.heads == 0 || self.layers == 0 || self.embed_dim == 0 {
            return Err(invalid("heads, layers and embed_dim must be positive"));
        }
        if !(self.learning_rate > 0.0) || !(self.weight_decay >= 0.0) {
            return Err(invalid("learning rate must be positive and weight decay non-negative"));
        }
        if !(self.tau > 0.0) || !(self.beta_alpha > 0.0) {
            return Err(invalid("tau and beta_alpha must be positive"));
        }
        let a = &self.ablation;
        if a.conventional_ood_mixup && a.selected_ood_no_mixup {
            return Err(invalid("conventional_ood_mixup and selected_ood_no_mixup are exclusive"));
        }
        Ok(())
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) if slot.is_object() && v.is_object() => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}
