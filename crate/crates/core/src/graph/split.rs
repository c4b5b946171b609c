use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::Graph;
use crate::error::{invalid, Error, Result};
use crate::rng;

/// Percentages of ID nodes used for training and validation. The rest of
/// the ID nodes, plus every OOD node, are test nodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train_pct: f64,
    pub val_pct: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train_pct: 10.0, val_pct: 10.0 }
    }
}

/// Known classes, node masks and labels remapped so that known classes are
/// `0..C` and every novel class collapses into `C` (the unknown class).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpenSetSplit {
    pub id_classes: Vec<usize>,
    pub train_mask: Vec<bool>,
    pub val_mask: Vec<bool>,
    pub test_mask: Vec<bool>,
    pub remapped_labels: Vec<usize>,
}

fn mask_nodes(mask: &[bool]) -> Vec<usize> {
    mask.iter().enumerate().filter(|(_, &m)| m).map(|(i, _)| i).collect()
}

impl OpenSetSplit {
    /// Number of known classes `C`; the unknown class index is `C`.
    pub fn num_known(&self) -> usize {
        self.id_classes.len()
    }

    pub fn unknown_class(&self) -> usize {
        self.num_known()
    }

    pub fn num_nodes(&self) -> usize {
        self.remapped_labels.len()
    }

    pub fn train_nodes(&self) -> Vec<usize> {
        mask_nodes(&self.train_mask)
    }

    pub fn val_nodes(&self) -> Vec<usize> {
        mask_nodes(&self.val_mask)
    }

    pub fn test_nodes(&self) -> Vec<usize> {
        mask_nodes(&self.test_mask)
    }

    pub fn is_ood(&self, node: usize) -> bool {
        self.remapped_labels[node] == self.unknown_class()
    }
}

/// Default known-class count: the first half of the classes, rounded up.
pub fn default_id_classes(total_classes: usize) -> usize {
    total_classes.div_ceil(2)
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

/// Open-set split with the default 10/10/80 ID partition.
pub fn make_openset_split(graph: &Graph, id_class_count: usize, seed: u64) -> Result<OpenSetSplit> {
    make_openset_split_with(graph, id_class_count, SplitRatios::default(), seed)
}

/// The `id_class_count` lowest class ids are known. ID nodes are shuffled
/// with a seeded stream and cut into train/val/test by `ratios`, counts
/// rounded half up; OOD nodes all go to test.
pub fn make_openset_split_with(
    graph: &Graph,
    id_class_count: usize,
    ratios: SplitRatios,
    seed: u64,
) -> Result<OpenSetSplit> {
    let labels = graph.labels().ok_or_else(|| invalid("graph has no labels"))?;
    let total = graph.num_classes();
    if id_class_count == 0 || id_class_count >= total {
        return Err(invalid(format!(
            "id_class_count must be in [1, {total}), got {id_class_count}"
        )));
    }
    if !(ratios.train_pct > 0.0 && ratios.val_pct >= 0.0 && ratios.train_pct + ratios.val_pct <= 100.0) {
        return Err(invalid(format!("bad split ratios {ratios:?}")));
    }

    let mut counts = vec![0usize; id_class_count];
    for &y in labels {
        if y < id_class_count {
            counts[y] += 1;
        }
    }
    if let Some(empty) = counts.iter().position(|&c| c == 0) {
        return Err(Error::EmptyClass(empty));
    }

    let n = graph.num_nodes();
    let remapped_labels: Vec<usize> = labels.iter().map(|&y| y.min(id_class_count)).collect();
    let mut id_nodes: Vec<usize> = (0..n).filter(|&i| labels[i] < id_class_count).collect();
    id_nodes.shuffle(&mut rng::stream(seed, "split"));

    let n_id = id_nodes.len();
    let n_train = round_half_up(n_id as f64 * ratios.train_pct / 100.0).max(1);
    let n_val = round_half_up(n_id as f64 * ratios.val_pct / 100.0).min(n_id - n_train);

    let mut train_mask = vec![false; n];
    let mut val_mask = vec![false; n];
    let mut test_mask: Vec<bool> = labels.iter().map(|&y| y >= id_class_count).collect();
    for (k, &i) in id_nodes.iter().enumerate() {
        if k < n_train {
            train_mask[i] = true;
        } else if k < n_train + n_val {
            val_mask[i] = true;
        } else {
            test_mask[i] = true;
        }
    }

    Ok(OpenSetSplit {
        id_classes: (0..id_class_count).collect(),
        train_mask,
        val_mask,
        test_mask,
        remapped_labels,
    })
}
