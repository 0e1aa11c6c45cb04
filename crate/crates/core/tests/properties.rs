//! Property tests for the core invariants: DBSCAN vs union-find
//! equivalence, cosine scale invariance, permutation consistency, involution
//! drift, partition coverage and config round-trips.

use std::sync::Arc;

use ndarray::Array2;
use proptest::prelude::*;

use fedccfa::cluster::{cluster_all_classes, dbscan, madd_matrix, ClassClassifierSet, DistanceMatrix};
use fedccfa::data::{
    active_permutation, dirichlet_partition, label_entropy, make_synthetic, ClientView,
    DriftSchedule, PartitionSpec, SwapRule,
};
use fedccfa::ExperimentConfig;

/// Independent oracle: connected components over edges with distance <= eps.
fn union_find_components(matrix: &DistanceMatrix, eps: f64) -> Vec<Vec<usize>> {
    let n = matrix.client_ids.len();
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, x: usize) -> usize {
        if parent[x] != x {
            let root = find(parent, parent[x]);
            parent[x] = root;
        }
        parent[x]
    }
    for i in 0..n {
        for j in (i + 1)..n {
            if matrix.values[[i, j]] <= eps {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a] = b;
                }
            }
        }
    }
    let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
    for i in 0..n {
        let root = find(&mut parent, i);
        groups.entry(root).or_default().push(matrix.client_ids[i]);
    }
    let mut out: Vec<Vec<usize>> = groups.into_values().collect();
    for group in &mut out {
        group.sort_unstable();
    }
    out.sort_by_key(|g| g[0]);
    out
}

fn symmetric_matrix(n: usize, raw: &[f64]) -> DistanceMatrix {
    let mut values = Array2::zeros((n, n));
    let mut cursor = 0;
    for i in 0..n {
        for j in (i + 1)..n {
            values[[i, j]] = raw[cursor];
            values[[j, i]] = raw[cursor];
            cursor += 1;
        }
    }
    DistanceMatrix { values, client_ids: (0..n).collect(), fallback: false }
}

proptest! {
    #[test]
    fn dbscan_equals_union_find(n in 2usize..10, raw in prop::collection::vec(0.0f64..0.3, 45)) {
        let matrix = symmetric_matrix(n, &raw);
        prop_assert_eq!(dbscan(&matrix, 0.1, 1), union_find_components(&matrix, 0.1));
    }

    #[test]
    fn madd_is_scale_invariant(
        rows in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 4), 3..8),
        scale in 0.1f64..10.0,
    ) {
        // skip degenerate near-zero vectors
        prop_assume!(rows.iter().all(|r| r.iter().map(|v| v * v).sum::<f64>() > 0.01));
        let make_set = |factor: f64| ClassClassifierSet {
            client_ids: (0..rows.len()).collect(),
            vectors: rows
                .iter()
                .map(|r| {
                    Array2::from_shape_vec((1, 4), r.iter().map(|v| v * factor).collect()).unwrap()
                })
                .collect(),
        };
        let base = madd_matrix(&make_set(1.0), 0);
        let scaled = madd_matrix(&make_set(scale), 0);
        for (a, b) in base.values.iter().zip(scaled.values.iter()) {
            prop_assert!((a - b).abs() < 1e-9);
        }
        let (part_a, _) = cluster_all_classes(&make_set(1.0), 0.1, 1).unwrap();
        let (part_b, _) = cluster_all_classes(&make_set(scale), 0.1, 1).unwrap();
        prop_assert_eq!(part_a.per_class, part_b.per_class);
    }

    #[test]
    fn client_permutation_permutes_partition(
        rows in prop::collection::vec(prop::collection::vec(-1.0f64..1.0, 3), 4..7),
        rotation in 0usize..6,
    ) {
        prop_assume!(rows.iter().all(|r| r.iter().map(|v| v * v).sum::<f64>() > 0.01));
        let n = rows.len();
        let rotation = rotation % n;
        let ids: Vec<usize> = (0..n).collect();
        let make_set = |order: &[usize]| ClassClassifierSet {
            client_ids: order.iter().map(|&i| ids[i]).collect(),
            vectors: order
                .iter()
                .map(|&i| Array2::from_shape_vec((1, 3), rows[i].clone()).unwrap())
                .collect(),
        };
        let base_order: Vec<usize> = (0..n).collect();
        let rotated: Vec<usize> = (0..n).map(|i| (i + rotation) % n).collect();
        let (a, _) = cluster_all_classes(&make_set(&base_order), 0.1, 1).unwrap();
        let (b, _) = cluster_all_classes(&make_set(&rotated), 0.1, 1).unwrap();
        // same client ids, same grouping, regardless of presentation order
        prop_assert_eq!(a.per_class, b.per_class);
    }

    #[test]
    fn drift_permutation_is_involution(
        client in 0usize..20,
        round in 0usize..200,
        classes in 7usize..12,
    ) {
        let schedule = fedccfa::data::build_drift_schedule(fedccfa::DriftPattern::Reoccurring, 200);
        let perm = active_permutation(&schedule, client, round, classes);
        for (b, &target) in perm.iter().enumerate() {
            prop_assert_eq!(perm[target], b);
            prop_assert!(target < classes);
        }
    }

    #[test]
    fn entropy_is_bounded(seed in 0u64..50, classes in 2usize..8) {
        let ds = Arc::new(make_synthetic(classes, 4, 20, 2.0, 0.5, seed).unwrap());
        let count = 1 + (seed as usize % ds.len());
        let view = ClientView::new(0, ds, (0..count).collect());
        let h = label_entropy(&view);
        prop_assert!(h >= 0.0);
        prop_assert!(h <= (classes as f64).ln() + 1e-12);
    }

    #[test]
    fn partition_covers_and_guarantees_minimum(seed in 0u64..30, alpha in 0.05f64..5.0) {
        let ds = make_synthetic(4, 4, 60, 2.0, 0.5, seed).unwrap();
        let spec = PartitionSpec { client_count: 5, dirichlet_alpha: alpha, min_per_class: 5, seed };
        let parts = dirichlet_partition(&ds, &spec).unwrap();
        let mut seen = vec![false; ds.len()];
        for (client, part) in parts.iter().enumerate() {
            let mut counts = vec![0usize; 4];
            for &i in part {
                prop_assert!(!seen[i]);
                seen[i] = true;
                counts[ds.labels[i]] += 1;
            }
            prop_assert!(counts.iter().all(|&c| c >= 5), "client {} counts {:?}", client, counts);
        }
        prop_assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn config_round_trips(
        gamma in 1.0f64..100.0,
        rounds in 1usize..300,
        seeds in prop::collection::vec(0u64..1000, 1..5),
        drift_idx in 0usize..4,
    ) {
        let mut config = ExperimentConfig::default();
        config.gamma = gamma;
        config.rounds = rounds;
        config.seeds = seeds;
        config.drift = match drift_idx {
            0 => fedccfa::DriftPattern::None,
            1 => fedccfa::DriftPattern::Sudden,
            2 => fedccfa::DriftPattern::Incremental,
            _ => fedccfa::DriftPattern::Reoccurring,
        };
        let parsed = ExperimentConfig::parse(&config.serialize()).unwrap();
        prop_assert_eq!(parsed, config);
    }

    #[test]
    fn train_and_test_permutations_match(client in 0usize..20, round in 0usize..200) {
        let schedule = fedccfa::data::build_drift_schedule(fedccfa::DriftPattern::Incremental, 200);
        let train_ds = Arc::new(make_synthetic(8, 4, 10, 2.0, 0.1, 1).unwrap());
        let test_ds = Arc::new(make_synthetic(8, 4, 5, 2.0, 0.1, 2).unwrap());
        let mut train_view = ClientView::new(client, train_ds, vec![0, 1]);
        let mut test_view = ClientView::new(client, test_ds, vec![0, 1]);
        train_view.set_round(&schedule, round);
        test_view.set_round(&schedule, round);
        prop_assert_eq!(train_view.permutation, test_view.permutation);
    }
}

#[test]
fn custom_swap_rule_roundtrip_restores_labels() {
    let rule = SwapRule::new(2, 3, 4, vec![1, 3]).unwrap();
    let schedule = DriftSchedule::from_events(vec![(3, vec![rule.clone()]), (9, vec![rule])]);
    for client in 0..8 {
        let before = active_permutation(&schedule, client, 0, 6);
        let after = active_permutation(&schedule, client, 20, 6);
        assert_eq!(before, after);
    }
}
