//! Datasets, non-IID Dirichlet partitioning, label-swap concept drift, balanced
//! batch sampling and label entropy.

use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Dirichlet, Distribution, Normal};

use crate::error::{Error, Result};
use crate::nn::FeatureBatch;

/// A dataset of flat feature vectors with class labels.
#[derive(Debug, Clone)]
pub struct LabeledDataset {
    /// n_samples x input_dim
    pub inputs: Array2<f64>,
    pub labels: Vec<usize>,
    pub class_count: usize,
}

impl LabeledDataset {
    pub fn new(inputs: Array2<f64>, labels: Vec<usize>, class_count: usize) -> Result<Self> {
        if inputs.nrows() != labels.len() || labels.is_empty() {
            return Err(Error::Data(format!(
                "inputs rows {} vs labels {}",
                inputs.nrows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= class_count) {
            return Err(Error::Data(format!(
                "label {bad} out of range for {class_count} classes"
            )));
        }
        Ok(Self { inputs, labels, class_count })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn input_dim(&self) -> usize {
        self.inputs.ncols()
    }
}

/// How to split a dataset across clients.
#[derive(Debug, Clone)]
pub struct PartitionSpec {
    pub client_count: usize,
    pub dirichlet_alpha: f64,
    pub min_per_class: usize,
    pub seed: u64,
}

/// Swap two class labels for clients whose id matches a residue condition.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SwapRule {
    pub class_a: usize,
    pub class_b: usize,
    pub modulus: usize,
    /// client matches when (client_id % modulus) is in this set
    pub residues: Vec<usize>,
}

impl SwapRule {
    pub fn new(class_a: usize, class_b: usize, modulus: usize, residues: Vec<usize>) -> Result<Self> {
        if class_a == class_b {
            return Err(Error::Data("swap rule classes must differ".into()));
        }
        if modulus == 0 {
            return Err(Error::Data("swap rule modulus must be positive".into()));
        }
        Ok(Self { class_a, class_b, modulus, residues })
    }

    pub fn matches(&self, client_id: usize) -> bool {
        self.residues.contains(&(client_id % self.modulus))
    }
}

/// The three label-swap rules used throughout the drift experiments:
/// (1,2) for k%10 < 3, (3,4) for 3 <= k%10 <= 5, (5,6) for k%10 > 5.
pub fn standard_swap_rules() -> Vec<SwapRule> {
    vec![
        SwapRule::new(1, 2, 10, vec![0, 1, 2]).unwrap(),
        SwapRule::new(3, 4, 10, vec![3, 4, 5]).unwrap(),
        SwapRule::new(5, 6, 10, vec![6, 7, 8, 9]).unwrap(),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DriftPattern {
    None,
    Sudden,
    Incremental,
    Reoccurring,
}

impl std::str::FromStr for DriftPattern {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "sudden" => Ok(Self::Sudden),
            "incremental" => Ok(Self::Incremental),
            "reoccurring" => Ok(Self::Reoccurring),
            other => Err(Error::Config(format!("unknown drift pattern '{other}'"))),
        }
    }
}

impl std::fmt::Display for DriftPattern {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::None => "none",
            Self::Sudden => "sudden",
            Self::Incremental => "incremental",
            Self::Reoccurring => "reoccurring",
        };
        f.write_str(s)
    }
}

/// Timed label-swap events defining each client's conditional distribution per round.
#[derive(Debug, Clone)]
pub struct DriftSchedule {
    pub pattern: DriftPattern,
    pub events: Vec<(usize, Vec<SwapRule>)>,
}

impl DriftSchedule {
    pub fn none() -> Self {
        Self { pattern: DriftPattern::None, events: Vec::new() }
    }

    /// Custom schedule for tests and ablations.
    pub fn from_events(events: Vec<(usize, Vec<SwapRule>)>) -> Self {
        Self { pattern: DriftPattern::Sudden, events }
    }
}

/// Rescale the reference drift rounds (100/110/120/150 of 200) to `total_rounds`
/// and emit the events for the requested pattern.
pub fn build_drift_schedule(pattern: DriftPattern, total_rounds: usize) -> DriftSchedule {
    let scale = |r: usize| r * total_rounds / 200;
    let rules = standard_swap_rules();
    let events = match pattern {
        DriftPattern::None => Vec::new(),
        DriftPattern::Sudden => vec![(scale(100), rules)],
        DriftPattern::Incremental => vec![
            (scale(100), vec![rules[0].clone()]),
            (scale(110), vec![rules[1].clone()]),
            (scale(120), vec![rules[2].clone()]),
        ],
        DriftPattern::Reoccurring => {
            vec![(scale(100), rules.clone()), (scale(150), rules)]
        }
    };
    DriftSchedule { pattern, events }
}

/// The label permutation active for `client_id` at round `t`: the composition of
/// every matching swap at event rounds <= t. Each swap is an involution, so a
/// reoccurring event reverts the concept.
pub fn active_permutation(
    schedule: &DriftSchedule,
    client_id: usize,
    round: usize,
    class_count: usize,
) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..class_count).collect();
    for (event_round, rules) in &schedule.events {
        if *event_round > round {
            continue;
        }
        for rule in rules {
            if rule.matches(client_id) && rule.class_a < class_count && rule.class_b < class_count {
                perm.swap(rule.class_a, rule.class_b);
            }
        }
    }
    perm
}

/// One client's slice of the dataset together with its current label permutation.
#[derive(Debug, Clone)]
pub struct ClientView {
    pub client_id: usize,
    pub dataset: Arc<LabeledDataset>,
    pub indices: Vec<usize>,
    /// current label c is reported for base label b when permutation[b] == c
    pub permutation: Vec<usize>,
}

impl ClientView {
    pub fn new(client_id: usize, dataset: Arc<LabeledDataset>, indices: Vec<usize>) -> Self {
        let class_count = dataset.class_count;
        Self { client_id, dataset, indices, permutation: (0..class_count).collect() }
    }

    pub fn set_round(&mut self, schedule: &DriftSchedule, round: usize) {
        self.permutation =
            active_permutation(schedule, self.client_id, round, self.dataset.class_count);
    }

    /// Current (drifted) label of the sample at dataset index `idx`.
    pub fn current_label(&self, idx: usize) -> usize {
        self.permutation[self.dataset.labels[idx]]
    }

    /// Per-class counts of the current training view.
    pub fn label_histogram(&self) -> Vec<usize> {
        let mut counts = vec![0usize; self.dataset.class_count];
        for &idx in &self.indices {
            counts[self.current_label(idx)] += 1;
        }
        counts
    }

    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Allocate each class's instances across clients proportionally to a Dir_K(alpha)
/// draw, then repair so every client holds at least `min_per_class` samples of
/// every class (moving from the richest client per class, deterministically).
pub fn dirichlet_partition(
    dataset: &LabeledDataset,
    spec: &PartitionSpec,
) -> Result<Vec<Vec<usize>>> {
    use rand::SeedableRng;
    let k = spec.client_count;
    if k == 0 {
        return Err(Error::Config("client_count must be >= 1".into()));
    }
    if spec.dirichlet_alpha <= 0.0 {
        return Err(Error::Config("dirichlet_alpha must be > 0".into()));
    }
    let c_count = dataset.class_count;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c_count];
    for (idx, &label) in dataset.labels.iter().enumerate() {
        by_class[label].push(idx);
    }
    for (c, idxs) in by_class.iter().enumerate() {
        if idxs.len() < k * spec.min_per_class {
            return Err(Error::Config(format!(
                "class {c} has {} samples, need at least {} for {k} clients x {} per class",
                idxs.len(),
                k * spec.min_per_class,
                spec.min_per_class
            )));
        }
    }

    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(spec.seed);
    let mut parts: Vec<Vec<usize>> = vec![Vec::new(); k];
    // per-client per-class counts, for the repair pass
    let mut counts = vec![vec![0usize; c_count]; k];
    let mut holdings: Vec<Vec<Vec<usize>>> = vec![vec![Vec::new(); c_count]; k];

    for (c, idxs) in by_class.iter().enumerate() {
        let mut idxs = idxs.clone();
        idxs.shuffle(&mut rng);
        let proportions: Vec<f64> = if k == 1 {
            vec![1.0]
        } else {
            Dirichlet::new(&vec![spec.dirichlet_alpha; k])
                .map_err(|e| Error::Config(format!("dirichlet: {e}")))?
                .sample(&mut rng)
        };
        let n = idxs.len();
        let mut cursor = 0usize;
        let mut cumulative = 0.0;
        for (client, &p) in proportions.iter().enumerate() {
            cumulative += p;
            let end = if client + 1 == k { n } else { ((cumulative * n as f64).floor() as usize).min(n) };
            for &idx in &idxs[cursor..end] {
                holdings[client][c].push(idx);
            }
            counts[client][c] = end - cursor;
            cursor = end;
        }
        // repair: move from the richest holder until everyone has min_per_class
        loop {
            let Some(poor) = (0..k).find(|&cl| counts[cl][c] < spec.min_per_class) else {
                break;
            };
            let rich = (0..k)
                .max_by_key(|&cl| (counts[cl][c], std::cmp::Reverse(cl)))
                .expect("at least one client");
            debug_assert!(counts[rich][c] > spec.min_per_class);
            let moved = holdings[rich][c].pop().expect("rich client holds samples");
            holdings[poor][c].push(moved);
            counts[rich][c] -= 1;
            counts[poor][c] += 1;
        }
    }
    for (client, classes) in holdings.into_iter().enumerate() {
        for class_idxs in classes {
            parts[client].extend(class_idxs);
        }
        parts[client].sort_unstable();
    }
    Ok(parts)
}

/// Draw exactly `per_class` samples of every current-label class, without
/// replacement, as a training batch.
pub fn sample_balanced_batch<R: Rng>(
    view: &ClientView,
    per_class: usize,
    rng: &mut R,
) -> Result<FeatureBatch> {
    let c_count = view.dataset.class_count;
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); c_count];
    for &idx in &view.indices {
        by_class[view.current_label(idx)].push(idx);
    }
    let mut chosen = Vec::with_capacity(per_class * c_count);
    for (c, idxs) in by_class.iter_mut().enumerate() {
        if idxs.len() < per_class {
            return Err(Error::Data(format!(
                "client {} holds {} samples of class {c}, need {per_class}",
                view.client_id,
                idxs.len()
            )));
        }
        idxs.shuffle(rng);
        chosen.extend(idxs[..per_class].iter().map(|&idx| (idx, c)));
    }
    batch_from_indices(view, chosen.into_iter())
}

fn batch_from_indices(
    view: &ClientView,
    picks: impl Iterator<Item = (usize, usize)>,
) -> Result<FeatureBatch> {
    let picks: Vec<(usize, usize)> = picks.collect();
    let dim = view.dataset.input_dim();
    let mut inputs = Array2::zeros((picks.len(), dim));
    let mut labels = Vec::with_capacity(picks.len());
    for (row, (idx, label)) in picks.into_iter().enumerate() {
        inputs.row_mut(row).assign(&view.dataset.inputs.row(idx));
        labels.push(label);
    }
    FeatureBatch::new(inputs, labels)
}

/// Batch of the given dataset indices labeled under the view's current permutation.
pub fn batch_of(view: &ClientView, indices: &[usize]) -> Result<FeatureBatch> {
    batch_from_indices(view, indices.iter().map(|&idx| (idx, view.current_label(idx))))
}

/// Shannon entropy (natural log) of the client's current empirical label distribution.
pub fn label_entropy(view: &ClientView) -> f64 {
    let counts = view.label_histogram();
    let total: usize = counts.iter().sum();
    if total == 0 {
        return 0.0;
    }
    let total = total as f64;
    counts
        .iter()
        .filter(|&&n| n > 0)
        .map(|&n| {
            let p = n as f64 / total;
            -p * p.ln()
        })
        .sum()
}

/// Gaussian class blobs: class c is centered at `separation * u_c` for a fixed
/// unit direction u_c, with isotropic noise. Deterministic in the seed.
pub fn make_synthetic(
    class_count: usize,
    input_dim: usize,
    per_class: usize,
    separation: f64,
    noise: f64,
    seed: u64,
) -> Result<LabeledDataset> {
    use rand::SeedableRng;
    if class_count < 2 || per_class < 1 || input_dim == 0 {
        return Err(Error::Config("make_synthetic needs C >= 2, per_class >= 1, input_dim >= 1".into()));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let normal = Normal::new(0.0, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    let centers: Vec<Array1<f64>> = (0..class_count)
        .map(|c| class_center(c, input_dim))
        .collect();
    let n = class_count * per_class;
    let mut inputs = Array2::zeros((n, input_dim));
    let mut labels = Vec::with_capacity(n);
    for c in 0..class_count {
        for s in 0..per_class {
            let row = c * per_class + s;
            for j in 0..input_dim {
                inputs[[row, j]] = separation * centers[c][j] + noise * normal.sample(&mut rng);
            }
            labels.push(c);
        }
    }
    LabeledDataset::new(inputs, labels, class_count)
}

/// Fixed unit direction for class c: the c-th axis when it exists, otherwise a
/// deterministic pseudo-random unit vector.
fn class_center(c: usize, input_dim: usize) -> Array1<f64> {
    use rand::SeedableRng;
    if c < input_dim {
        let mut v = Array1::zeros(input_dim);
        v[c] = 1.0;
        return v;
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0x5EED_0000 + c as u64);
    let normal = Normal::new(0.0, 1.0).unwrap();
    let mut v = Array1::from_shape_fn(input_dim, |_| normal.sample(&mut rng));
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v /= norm.max(1e-12);
    v
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn uniform_dataset(class_count: usize, per_class: usize) -> LabeledDataset {
        make_synthetic(class_count, 4, per_class, 2.0, 0.2, 99).unwrap()
    }

    #[test]
    fn single_client_gets_everything() {
        let ds = uniform_dataset(3, 20);
        let spec = PartitionSpec { client_count: 1, dirichlet_alpha: 0.5, min_per_class: 5, seed: 1 };
        let parts = dirichlet_partition(&ds, &spec).unwrap();
        assert_eq!(parts.len(), 1);
        assert_eq!(parts[0].len(), ds.len());
    }

    #[test]
    fn large_alpha_balances_allocation() {
        let ds = uniform_dataset(2, 1000);
        let mut within = 0;
        for seed in 0..20 {
            let spec = PartitionSpec {
                client_count: 2,
                dirichlet_alpha: 1e6,
                min_per_class: 5,
                seed,
            };
            let parts = dirichlet_partition(&ds, &spec).unwrap();
            let count0 = parts[0].iter().filter(|&&i| ds.labels[i] == 0).count();
            if (450..=550).contains(&count0) {
                within += 1;
            }
        }
        assert!(within >= 18, "only {within}/20 seeds balanced");
    }

    #[test]
    fn min_per_class_is_guaranteed() {
        let ds = uniform_dataset(10, 60);
        let spec = PartitionSpec { client_count: 8, dirichlet_alpha: 0.05, min_per_class: 5, seed: 3 };
        let parts = dirichlet_partition(&ds, &spec).unwrap();
        for part in &parts {
            let mut counts = vec![0usize; 10];
            for &i in part {
                counts[ds.labels[i]] += 1;
            }
            assert!(counts.iter().all(|&n| n >= 5), "counts {counts:?}");
        }
    }

    #[test]
    fn partition_is_disjoint_and_covers() {
        let ds = uniform_dataset(4, 50);
        let spec = PartitionSpec { client_count: 5, dirichlet_alpha: 0.3, min_per_class: 5, seed: 7 };
        let parts = dirichlet_partition(&ds, &spec).unwrap();
        let mut seen = vec![false; ds.len()];
        for part in &parts {
            for &i in part {
                assert!(!seen[i], "index {i} assigned twice");
                seen[i] = true;
            }
        }
        assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn infeasible_min_per_class_names_class() {
        let ds = uniform_dataset(3, 4);
        let spec = PartitionSpec { client_count: 2, dirichlet_alpha: 0.5, min_per_class: 5, seed: 1 };
        let err = dirichlet_partition(&ds, &spec).unwrap_err();
        assert!(err.to_string().contains("class 0"), "{err}");
    }

    #[test]
    fn schedule_none_is_empty() {
        assert!(build_drift_schedule(DriftPattern::None, 200).events.is_empty());
    }

    #[test]
    fn schedule_sudden_at_full_scale() {
        let s = build_drift_schedule(DriftPattern::Sudden, 200);
        assert_eq!(s.events.len(), 1);
        assert_eq!(s.events[0].0, 100);
        assert_eq!(s.events[0].1.len(), 3);
    }

    #[test]
    fn schedule_incremental_rescales() {
        let s = build_drift_schedule(DriftPattern::Incremental, 60);
        let rounds: Vec<usize> = s.events.iter().map(|(r, _)| *r).collect();
        assert_eq!(rounds, vec![30, 33, 36]);
    }

    #[test]
    fn swap_is_an_involution() {
        let rule = SwapRule::new(1, 2, 10, vec![0, 1, 2]).unwrap();
        let schedule = DriftSchedule::from_events(vec![
            (5, vec![rule.clone()]),
            (10, vec![rule]),
        ]);
        let perm_mid = active_permutation(&schedule, 0, 7, 4);
        assert_eq!(perm_mid, vec![0, 2, 1, 3]);
        let perm_after = active_permutation(&schedule, 0, 12, 4);
        assert_eq!(perm_after, vec![0, 1, 2, 3]);
    }

    #[test]
    fn middle_residue_rule_matches_expected_clients() {
        let rule = SwapRule::new(3, 4, 10, vec![3, 4, 5]).unwrap();
        let schedule = DriftSchedule::from_events(vec![(10, vec![rule])]);
        let perm = active_permutation(&schedule, 4, 10, 6);
        assert_eq!(perm, vec![0, 1, 2, 4, 3, 5]);
        let perm = active_permutation(&schedule, 6, 10, 6);
        assert_eq!(perm, vec![0, 1, 2, 3, 4, 5]);
    }

    #[test]
    fn reoccurring_drift_restores_histogram() {
        let ds = Arc::new(uniform_dataset(8, 40));
        let schedule = build_drift_schedule(DriftPattern::Reoccurring, 200);
        let mut view = ClientView::new(1, ds, (0..100).collect());
        view.set_round(&schedule, 0);
        let before = view.label_histogram();
        view.set_round(&schedule, 120);
        assert_ne!(view.label_histogram(), before);
        view.set_round(&schedule, 160);
        assert_eq!(view.label_histogram(), before);
        assert_eq!(view.permutation, (0..8).collect::<Vec<_>>());
    }

    #[test]
    fn balanced_batch_is_flat() {
        let ds = Arc::new(uniform_dataset(10, 30));
        let view = ClientView::new(0, ds.clone(), (0..ds.len()).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let batch = sample_balanced_batch(&view, 5, &mut rng).unwrap();
            assert_eq!(batch.len(), 50);
            let mut counts = vec![0usize; 10];
            for &l in &batch.labels {
                counts[l] += 1;
            }
            assert!(counts.iter().all(|&n| n == 5));
        }
    }

    #[test]
    fn tiny_balanced_batch() {
        let ds = Arc::new(uniform_dataset(2, 3));
        let view = ClientView::new(0, ds.clone(), (0..ds.len()).collect());
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let batch = sample_balanced_batch(&view, 1, &mut rng).unwrap();
        let mut labels = batch.labels.clone();
        labels.sort_unstable();
        assert_eq!(labels, vec![0, 1]);
    }

    #[test]
    fn deficient_class_is_an_error() {
        let ds = Arc::new(uniform_dataset(2, 3));
        // only class-0 samples in the view
        let view = ClientView::new(0, ds, vec![0, 1, 2]);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        assert!(sample_balanced_batch(&view, 1, &mut rng).is_err());
    }

    #[test]
    fn entropy_cases() {
        let ds = Arc::new(uniform_dataset(10, 10));
        let full = ClientView::new(0, ds.clone(), (0..ds.len()).collect());
        assert_abs_diff_eq!(label_entropy(&full), (10.0f64).ln(), epsilon = 1e-12);
        let single = ClientView::new(0, ds.clone(), (0..10).collect());
        assert_abs_diff_eq!(label_entropy(&single), 0.0, epsilon = 1e-12);
        let two: Vec<usize> = (0..10).chain(10..20).collect();
        let half = ClientView::new(0, ds, two);
        assert_abs_diff_eq!(label_entropy(&half), (2.0f64).ln(), epsilon = 1e-12);
    }

    #[test]
    fn synthetic_zero_noise_collapses_to_center() {
        let ds = make_synthetic(3, 5, 4, 2.0, 0.0, 1).unwrap();
        for c in 0..3 {
            let base = ds.inputs.row(c * 4);
            for s in 1..4 {
                assert_eq!(ds.inputs.row(c * 4 + s), base);
            }
        }
    }

    #[test]
    fn synthetic_separable_by_nearest_centroid() {
        let ds = make_synthetic(4, 6, 100, 5.0, 0.3, 2).unwrap();
        let mut centroids = vec![Array1::<f64>::zeros(6); 4];
        let mut counts = vec![0usize; 4];
        for (i, &l) in ds.labels.iter().enumerate() {
            centroids[l] += &ds.inputs.row(i);
            counts[l] += 1;
        }
        for (c, centroid) in centroids.iter_mut().enumerate() {
            *centroid /= counts[c] as f64;
        }
        let mut correct = 0;
        for (i, &l) in ds.labels.iter().enumerate() {
            let row = ds.inputs.row(i);
            let pred = (0..4)
                .min_by(|&a, &b| {
                    let da: f64 = (&row - &centroids[a]).mapv(|v| v * v).sum();
                    let db: f64 = (&row - &centroids[b]).mapv(|v| v * v).sum();
                    da.partial_cmp(&db).unwrap()
                })
                .unwrap();
            if pred == l {
                correct += 1;
            }
        }
        assert!(correct as f64 / ds.len() as f64 >= 0.99);
    }

    #[test]
    fn synthetic_is_deterministic() {
        let a = make_synthetic(3, 4, 10, 2.0, 0.5, 42).unwrap();
        let b = make_synthetic(3, 4, 10, 2.0, 0.5, 42).unwrap();
        assert_eq!(a.inputs, b.inputs);
        assert_eq!(a.labels, b.labels);
    }
}
