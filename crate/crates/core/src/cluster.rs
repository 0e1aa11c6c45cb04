//! Class-level clustering: MADD distance matrices over balanced class
//! classifiers and DBSCAN over the precomputed distances.

use ndarray::{Array1, Array2};

use crate::error::{Error, Result};
use crate::nn::ModelParams;

const COSINE_GUARD: f64 = 1e-12;

/// Per-client class classifier vectors: for client k, row c of `vectors[k]` is
/// classifier weight row c concatenated with its bias entry (hidden_dim + 1).
#[derive(Debug, Clone)]
pub struct ClassClassifierSet {
    pub client_ids: Vec<usize>,
    /// one matrix per client, class_count x (hidden_dim + 1)
    pub vectors: Vec<Array2<f64>>,
}

impl ClassClassifierSet {
    pub fn from_models(entries: &[(usize, &ModelParams)]) -> Self {
        let client_ids = entries.iter().map(|(id, _)| *id).collect();
        let vectors = entries
            .iter()
            .map(|(_, params)| {
                let c = params.class_count();
                let h = params.hidden_dim();
                let mut m = Array2::zeros((c, h + 1));
                for row in 0..c {
                    for col in 0..h {
                        m[[row, col]] = params.classifier_weights[[row, col]];
                    }
                    m[[row, h]] = params.classifier_bias[row];
                }
                m
            })
            .collect();
        Self { client_ids, vectors }
    }

    pub fn class_count(&self) -> usize {
        self.vectors.first().map_or(0, |m| m.nrows())
    }

    pub fn len(&self) -> usize {
        self.client_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.client_ids.is_empty()
    }

    fn class_vector(&self, client_pos: usize, class: usize) -> Array1<f64> {
        self.vectors[client_pos].row(class).to_owned()
    }
}

/// Symmetric pairwise distances between selected clients for one class.
#[derive(Debug, Clone)]
pub struct DistanceMatrix {
    pub values: Array2<f64>,
    pub client_ids: Vec<usize>,
    /// true when fewer than 3 clients forced the raw pairwise-cosine fallback
    pub fallback: bool,
}

/// Per-class partition of the selected client ids.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClusterAssignment {
    /// per_class[c] is a list of clusters, each a sorted list of client ids
    pub per_class: Vec<Vec<Vec<usize>>>,
}

impl ClusterAssignment {
    /// The cluster (within class `class`) containing `client_id`, if any.
    pub fn cluster_of(&self, class: usize, client_id: usize) -> Option<&[usize]> {
        self.per_class[class]
            .iter()
            .find(|cluster| cluster.contains(&client_id))
            .map(|cluster| cluster.as_slice())
    }
}

/// 1 - cos(u, v) with a guarded denominator; range [0, 2].
pub fn cosine_distance(u: &[f64], v: &[f64]) -> f64 {
    let dot: f64 = u.iter().zip(v).map(|(a, b)| a * b).sum();
    let norm_u = u.iter().map(|x| x * x).sum::<f64>().sqrt();
    let norm_v = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    1.0 - dot / (norm_u * norm_v).max(COSINE_GUARD)
}

/// MADD over class `class`: D(i, j) is the mean absolute difference of cosine
/// distances from i and j to every other selected client. Falls back to raw
/// pairwise cosine distance when fewer than 3 clients are present.
pub fn madd_matrix(set: &ClassClassifierSet, class: usize) -> DistanceMatrix {
    let n = set.len();
    let vectors: Vec<Vec<f64>> = (0..n).map(|k| set.class_vector(k, class).to_vec()).collect();
    let mut values = Array2::zeros((n, n));
    if n < 3 {
        for i in 0..n {
            for j in (i + 1)..n {
                let d = cosine_distance(&vectors[i], &vectors[j]);
                values[[i, j]] = d;
                values[[j, i]] = d;
            }
        }
        return DistanceMatrix { values, client_ids: set.client_ids.clone(), fallback: true };
    }
    // precompute all pairwise cosine distances once
    let mut cos = Array2::zeros((n, n));
    for i in 0..n {
        for j in (i + 1)..n {
            let d = cosine_distance(&vectors[i], &vectors[j]);
            cos[[i, j]] = d;
            cos[[j, i]] = d;
        }
    }
    let denom = (n - 2) as f64;
    for i in 0..n {
        for j in (i + 1)..n {
            let mut acc = 0.0;
            for q in 0..n {
                if q != i && q != j {
                    acc += (cos[[i, q]] - cos[[j, q]]).abs();
                }
            }
            let d = acc / denom;
            values[[i, j]] = d;
            values[[j, i]] = d;
        }
    }
    DistanceMatrix { values, client_ids: set.client_ids.clone(), fallback: false }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum PointState {
    Unvisited,
    InCluster(usize),
    Noise,
}

/// Textbook DBSCAN over a precomputed distance matrix. Neighborhoods use
/// distance <= eps and include the point itself. With min_samples = 1 every
/// point is core, so no point ends up as noise; residual noise points (only
/// possible for min_samples > 1) are emitted as singleton clusters so the
/// result is always a partition.
///
/// Clusters are reported sorted by their smallest member id.
pub fn dbscan(matrix: &DistanceMatrix, eps: f64, min_samples: usize) -> Vec<Vec<usize>> {
    let n = matrix.client_ids.len();
    let neighbors = |p: usize| -> Vec<usize> {
        (0..n).filter(|&q| matrix.values[[p, q]] <= eps).collect()
    };
    let mut state = vec![PointState::Unvisited; n];
    let mut cluster_count = 0usize;
    for p in 0..n {
        if state[p] != PointState::Unvisited {
            continue;
        }
        let nbrs = neighbors(p);
        if nbrs.len() < min_samples {
            state[p] = PointState::Noise;
            continue;
        }
        let cluster = cluster_count;
        cluster_count += 1;
        state[p] = PointState::InCluster(cluster);
        let mut frontier: Vec<usize> = nbrs;
        while let Some(q) = frontier.pop() {
            match state[q] {
                PointState::InCluster(_) => continue,
                PointState::Noise | PointState::Unvisited => {
                    let was_unvisited = state[q] == PointState::Unvisited;
                    state[q] = PointState::InCluster(cluster);
                    if was_unvisited {
                        let q_nbrs = neighbors(q);
                        if q_nbrs.len() >= min_samples {
                            frontier.extend(q_nbrs);
                        }
                    }
                }
            }
        }
    }
    let mut clusters: Vec<Vec<usize>> = vec![Vec::new(); cluster_count];
    for (p, s) in state.iter().enumerate() {
        match s {
            PointState::InCluster(c) => clusters[*c].push(matrix.client_ids[p]),
            PointState::Noise => clusters.push(vec![matrix.client_ids[p]]),
            PointState::Unvisited => unreachable!("all points visited"),
        }
    }
    for cluster in &mut clusters {
        cluster.sort_unstable();
    }
    clusters.sort_by_key(|cluster| cluster[0]);
    clusters
}

/// Per-class MADD + DBSCAN, also returning every distance matrix for diagnostics.
pub fn cluster_all_classes(
    set: &ClassClassifierSet,
    eps: f64,
    min_samples: usize,
) -> Result<(ClusterAssignment, Vec<DistanceMatrix>)> {
    if set.is_empty() {
        return Err(Error::Invariant("cluster_all_classes on empty client set".into()));
    }
    let class_count = set.class_count();
    let mut per_class = Vec::with_capacity(class_count);
    let mut matrices = Vec::with_capacity(class_count);
    for class in 0..class_count {
        let matrix = madd_matrix(set, class);
        per_class.push(dbscan(&matrix, eps, min_samples));
        matrices.push(matrix);
    }
    Ok((ClusterAssignment { per_class }, matrices))
}

/// Rand index between two partitions of the same element set.
pub fn rand_index(a: &[Vec<usize>], b: &[Vec<usize>]) -> f64 {
    let mut elements: Vec<usize> = a.iter().flatten().copied().collect();
    elements.sort_unstable();
    let label_of = |partition: &[Vec<usize>], x: usize| {
        partition.iter().position(|cluster| cluster.contains(&x)).expect("element in partition")
    };
    let n = elements.len();
    if n < 2 {
        return 1.0;
    }
    let mut agree = 0usize;
    let mut total = 0usize;
    for i in 0..n {
        for j in (i + 1)..n {
            let same_a = label_of(a, elements[i]) == label_of(a, elements[j]);
            let same_b = label_of(b, elements[i]) == label_of(b, elements[j]);
            if same_a == same_b {
                agree += 1;
            }
            total += 1;
        }
    }
    agree as f64 / total as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::array;

    fn set_from_rows(rows: Vec<Vec<f64>>) -> ClassClassifierSet {
        let client_ids = (0..rows.len()).collect();
        let vectors = rows
            .into_iter()
            .map(|r| Array2::from_shape_vec((1, r.len()), r).unwrap())
            .collect();
        ClassClassifierSet { client_ids, vectors }
    }

    #[test]
    fn cosine_distance_cases() {
        assert_abs_diff_eq!(cosine_distance(&[1.0, 2.0], &[1.0, 2.0]), 0.0, epsilon = 1e-15);
        assert_abs_diff_eq!(cosine_distance(&[1.0, 0.0], &[0.0, 1.0]), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(
            cosine_distance(&[1.0, 0.0], &[1.0, 1.0]),
            1.0 - 1.0 / 2.0f64.sqrt(),
            epsilon = 1e-12
        );
    }

    #[test]
    fn madd_identical_vectors_is_zero() {
        let set = set_from_rows(vec![vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0], vec![1.0, 2.0]]);
        let m = madd_matrix(&set, 0);
        assert!(!m.fallback);
        assert!(m.values.iter().all(|&v| v.abs() <= 1e-12));
    }

    #[test]
    fn madd_single_term_hand_case() {
        // D(0,1) = |Cos(v0, v2) - Cos(v1, v2)| = |0 - 1| = 1
        let set = set_from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 0.0]]);
        let m = madd_matrix(&set, 0);
        assert_abs_diff_eq!(m.values[[0, 1]], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn madd_equidistant_reference_is_zero() {
        let set = set_from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0], vec![1.0, 1.0]]);
        let m = madd_matrix(&set, 0);
        assert_abs_diff_eq!(m.values[[0, 1]], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn madd_two_clients_falls_back() {
        let set = set_from_rows(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let m = madd_matrix(&set, 0);
        assert!(m.fallback);
        assert_abs_diff_eq!(m.values[[0, 1]], 1.0, epsilon = 1e-12);
    }

    #[test]
    fn madd_is_symmetric_with_zero_diagonal() {
        let set = set_from_rows(vec![
            vec![0.3, -1.0, 0.2],
            vec![1.5, 0.1, 0.0],
            vec![-0.2, 0.8, 0.7],
            vec![0.9, 0.9, -0.4],
        ]);
        let m = madd_matrix(&set, 0);
        for i in 0..4 {
            assert_eq!(m.values[[i, i]], 0.0);
            for j in 0..4 {
                assert!((m.values[[i, j]] - m.values[[j, i]]).abs() <= 1e-12);
                assert!(m.values[[i, j]] >= 0.0);
            }
        }
    }

    fn matrix_of(values: Array2<f64>) -> DistanceMatrix {
        let n = values.nrows();
        DistanceMatrix { values, client_ids: (0..n).collect(), fallback: false }
    }

    #[test]
    fn dbscan_all_far_gives_singletons() {
        let m = matrix_of(array![[0.0, 0.5, 0.5], [0.5, 0.0, 0.5], [0.5, 0.5, 0.0]]);
        let clusters = dbscan(&m, 0.1, 1);
        assert_eq!(clusters, vec![vec![0], vec![1], vec![2]]);
    }

    #[test]
    fn dbscan_pairs_close_points() {
        let m = matrix_of(array![[0.0, 0.05, 0.5], [0.05, 0.0, 0.5], [0.5, 0.5, 0.0]]);
        let clusters = dbscan(&m, 0.1, 1);
        assert_eq!(clusters, vec![vec![0, 1], vec![2]]);
    }

    #[test]
    fn dbscan_chains_through_density_reachability() {
        let m = matrix_of(array![[0.0, 0.09, 0.18], [0.09, 0.0, 0.09], [0.18, 0.09, 0.0]]);
        let clusters = dbscan(&m, 0.1, 1);
        assert_eq!(clusters, vec![vec![0, 1, 2]]);
    }

    #[test]
    fn cluster_all_classes_recovers_groups() {
        // two concept groups with opposite class-0 vectors
        let client_ids = vec![0, 1, 2, 3];
        let vectors = vec![
            array![[1.0, 0.1]],
            array![[-1.0, 0.2]],
            array![[1.0, 0.12]],
            array![[-1.0, 0.18]],
        ];
        let set = ClassClassifierSet { client_ids, vectors };
        let (assignment, matrices) = cluster_all_classes(&set, 0.1, 1).unwrap();
        assert_eq!(matrices.len(), 1);
        assert_eq!(assignment.per_class[0], vec![vec![0, 2], vec![1, 3]]);
        let truth = vec![vec![0, 2], vec![1, 3]];
        assert_abs_diff_eq!(rand_index(&assignment.per_class[0], &truth), 1.0);
    }

    #[test]
    fn single_concept_is_one_cluster() {
        let set = set_from_rows(vec![vec![1.0, 0.5]; 5]);
        let (assignment, _) = cluster_all_classes(&set, 0.1, 1).unwrap();
        assert_eq!(assignment.per_class[0].len(), 1);
        assert_eq!(assignment.per_class[0][0], vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn rand_index_counts_pair_agreements() {
        let a = vec![vec![0, 1], vec![2]];
        let b = vec![vec![0], vec![1], vec![2]];
        // pairs: (0,1) split disagrees, (0,2) and (1,2) agree -> 2/3
        assert_abs_diff_eq!(rand_index(&a, &b), 2.0 / 3.0, epsilon = 1e-12);
    }
}
