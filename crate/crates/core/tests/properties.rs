//! Randomized invariants and slow-oracle comparisons.

mod common;

use common::oracles::{auroc_pairs, best_split_sse, fpr95_sweep};
use negmix::gcl::{compute_prototypes, n2p_loss, p2p_loss, PairNorm};
use negmix::graph::{make_openset_split, synth_sbm, SbmParams};
use negmix::metrics::{accuracy_macro_f1, auroc, fpr_at_95};
use negmix::ood::{kmeans_1d, ood_score, select_candidates, EntropyMode, Selection};
use negmix::tensor::Matrix;
use proptest::prelude::*;

/// Scores drawn from a small grid so ties are frequent, with both labels present.
fn labeled_scores(max: usize) -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
    (2..=max)
        .prop_flat_map(|n| (prop::collection::vec(0u8..12, n), prop::collection::vec(any::<bool>(), n)))
        .prop_map(|(s, mut o)| {
            o[0] = true;
            o[1] = false;
            (s.into_iter().map(|x| x as f64 / 4.0).collect(), o)
        })
}

fn prob_rows(n: usize, c: usize) -> impl Strategy<Value = Matrix> {
    prop::collection::vec(prop::collection::vec(0.01f64..1.0, c + 1), n).prop_map(|rows| {
        let rows: Vec<Vec<f64>> = rows
            .into_iter()
            .map(|r| {
                let s: f64 = r.iter().sum();
                r.into_iter().map(|x| x / s).collect()
            })
            .collect();
        Matrix::from_rows(&rows).unwrap()
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn auroc_matches_pairwise_count((s, o) in labeled_scores(50)) {
        prop_assert_eq!(auroc(&s, &o).unwrap(), auroc_pairs(&s, &o));
    }

    #[test]
    fn fpr95_matches_threshold_sweep((s, o) in labeled_scores(50)) {
        prop_assert_eq!(fpr_at_95(&s, &o).unwrap(), fpr95_sweep(&s, &o));
    }

    #[test]
    fn kmeans_reaches_best_sorted_split(v in prop::collection::vec(-5.0f64..5.0, 2..=12)) {
        let km = kmeans_1d(&v);
        let best = best_split_sse(&v);
        prop_assert!(km.sse(&v) <= best + 1e-9 * (1.0 + best), "lloyd {} vs best {}", km.sse(&v), best);
    }

    #[test]
    fn detection_metrics_ignore_monotone_rescaling((s, o) in labeled_scores(40), a in 0.1f64..10.0, b in -5.0f64..5.0) {
        let t: Vec<f64> = s.iter().map(|x| a * x + b).collect();
        prop_assert_eq!(auroc(&s, &o).unwrap(), auroc(&t, &o).unwrap());
        prop_assert_eq!(fpr_at_95(&s, &o).unwrap(), fpr_at_95(&t, &o).unwrap());
    }

    #[test]
    fn detection_metrics_ignore_any_increasing_map((s, o) in labeled_scores(40)) {
        let t: Vec<f64> = s.iter().map(|x| x * x * x + x.exp()).collect();
        prop_assert_eq!(auroc(&s, &o).unwrap(), auroc(&t, &o).unwrap());
        prop_assert_eq!(fpr_at_95(&s, &o).unwrap(), fpr_at_95(&t, &o).unwrap());
    }

    #[test]
    fn flipping_scores_mirrors_auroc((s, o) in labeled_scores(40)) {
        let neg: Vec<f64> = s.iter().map(|x| -x).collect();
        let sum = auroc(&s, &o).unwrap() + auroc(&neg, &o).unwrap();
        prop_assert!((sum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn metric_ranges(
        pred in prop::collection::vec(0usize..4, 1..40),
        seed in any::<u64>(),
    ) {
        let truth: Vec<usize> = pred.iter().enumerate().map(|(i, &p)| if (seed >> (i % 64)) & 1 == 1 { p } else { (p + 1) % 4 }).collect();
        let mask = vec![true; pred.len()];
        let (acc, f1) = accuracy_macro_f1(&pred, &truth, &mask, 4).unwrap();
        prop_assert!((0.0..=1.0).contains(&acc) && (0.0..=1.0).contains(&f1));
        let (acc_self, f1_self) = accuracy_macro_f1(&truth, &truth, &mask, 4).unwrap();
        prop_assert_eq!(acc_self, 1.0);
        // absent classes score zero F1, so only present ones count
        let present = (0..4).filter(|c| truth.contains(c)).count() as f64;
        prop_assert!((f1_self - present / 4.0).abs() < 1e-12);
    }

    #[test]
    fn candidate_sets_are_disjoint_and_within_quota(
        scores in prop::collection::vec(0.0f64..3.0, 20),
        probs in prob_rows(20, 2),
        rho in 1.0f64..50.0,
        rank_only in any::<bool>(),
    ) {
        let unlabeled: Vec<usize> = (4..20).collect();
        let sel = if rank_only { Selection::RankOnly } else { Selection::ClusterThenRank };
        let c = select_candidates(&scores, &probs, &unlabeled, rho, sel).unwrap();
        let quota = (rho / 100.0 * unlabeled.len() as f64 + 0.5).floor() as usize;
        prop_assert!(c.ood.len() <= quota.max(1) && c.id.len() <= quota.max(1));
        prop_assert!(c.ood.iter().all(|i| !c.id.contains(i)));
        prop_assert!(c.ood.iter().chain(&c.id).all(|i| unlabeled.contains(i)));
        prop_assert_eq!(c.id.len(), c.id_labels.len());
        prop_assert!(c.id_labels.iter().all(|&y| y < 2));
    }

    #[test]
    fn ood_scores_are_bounded(probs in prob_rows(24, 2), seed in 0u64..50) {
        let g = synth_sbm(&SbmParams { n_per_class: 6, classes: 4, p_in: 0.4, p_out: 0.05, feat_dim: 4, feat_shift: 1.0, seed }).unwrap();
        let s = ood_score(&g, &probs, EntropyMode::Renormalized).unwrap();
        // each of the two parts lies in [0, 2]
        prop_assert!(s.scores.iter().all(|&x| (0.0..=4.0 + 1e-12).contains(&x)));
    }

    #[test]
    fn splits_partition_nodes(seed in any::<u64>(), k in 1usize..4) {
        let g = synth_sbm(&SbmParams { n_per_class: 10, classes: 4, p_in: 0.3, p_out: 0.02, feat_dim: 4, feat_shift: 1.0, seed: 1 }).unwrap();
        let s = make_openset_split(&g, k, seed).unwrap();
        for i in 0..g.num_nodes() {
            let count = [s.train_mask[i], s.val_mask[i], s.test_mask[i]].iter().filter(|&&m| m).count();
            prop_assert_eq!(count, 1);
            if s.is_ood(i) {
                prop_assert!(s.test_mask[i]);
                prop_assert_eq!(s.remapped_labels[i], k);
            } else {
                prop_assert!(s.remapped_labels[i] < k);
            }
        }
        prop_assert_eq!(s.id_classes.len(), k);
    }

    #[test]
    fn synthetic_edges_are_symmetric(seed in 0u64..200, p_in in 0.05f64..0.6) {
        let g = synth_sbm(&SbmParams { n_per_class: 8, classes: 3, p_in, p_out: 0.02, feat_dim: 3, feat_shift: 1.0, seed }).unwrap();
        for i in 0..g.num_nodes() {
            for &j in g.neighbors(i) {
                prop_assert!(g.neighbors(j).contains(&i));
                prop_assert_ne!(i, j);
            }
        }
    }

    #[test]
    fn more_unknown_mass_never_lowers_a_score(
        probs in prob_rows(24, 2),
        node in 0usize..24,
        target in 0.0f64..0.99,
        seed in 0u64..50,
    ) {
        // scaling the known part keeps its normalized entropy fixed
        let g = synth_sbm(&SbmParams { n_per_class: 6, classes: 4, p_in: 0.4, p_out: 0.05, feat_dim: 4, feat_shift: 1.0, seed }).unwrap();
        let mut bumped = probs.clone();
        let row = bumped.row_mut(node);
        prop_assume!(target > row[2]);
        let k = (1.0 - target) / (1.0 - row[2]);
        row[0] *= k;
        row[1] *= k;
        row[2] = target;
        let a = ood_score(&g, &probs, EntropyMode::Renormalized).unwrap();
        let b = ood_score(&g, &bumped, EntropyMode::Renormalized).unwrap();
        prop_assert!(b.scores[node] >= a.scores[node] - 1e-12);
    }

    #[test]
    fn candidate_selection_is_deterministic(
        scores in prop::collection::vec(0.0f64..3.0, 20),
        probs in prob_rows(20, 2),
        rho in 1.0f64..50.0,
    ) {
        let unlabeled: Vec<usize> = (4..20).collect();
        let a = select_candidates(&scores, &probs, &unlabeled, rho, Selection::ClusterThenRank).unwrap();
        let b = select_candidates(&scores, &probs, &unlabeled, rho, Selection::ClusterThenRank).unwrap();
        prop_assert_eq!(a, b);
    }

    #[test]
    fn contrastive_losses_ignore_embedding_scale(
        layers in prop::collection::vec(prop::collection::vec(-2.0f64..2.0, 12), 2..4),
        labels in prop::collection::vec(0usize..3, 6),
        c in 0.1f64..20.0,
        pivot_seed in any::<usize>(),
    ) {
        let mut labels = labels;
        labels[0] = 0;
        labels[1] = 1;
        let mats: Vec<Matrix> = layers.iter().map(|v| Matrix::from_vec(6, 2, v.clone()).unwrap()).collect();
        let scaled: Vec<Matrix> = mats.iter().map(|m| m.map(|x| c * x)).collect();
        let pivot = pivot_seed % mats.len();
        let pa = compute_prototypes(&mats, &labels, 3, 1.0).unwrap();
        let pb = compute_prototypes(&scaled, &labels, 3, 1.0).unwrap();
        let (a, b) = (p2p_loss(&pa, pivot, PairNorm::Layers).unwrap(), p2p_loss(&pb, pivot, PairNorm::Layers).unwrap());
        prop_assert!((a.unwrap() - b.unwrap()).abs() < 1e-9);
        let a = n2p_loss(&mats, &pa, &labels, pivot, PairNorm::Layers).unwrap();
        let b = n2p_loss(&scaled, &pb, &labels, pivot, PairNorm::Layers).unwrap();
        prop_assert!((a.unwrap() - b.unwrap()).abs() < 1e-9);
    }
}
