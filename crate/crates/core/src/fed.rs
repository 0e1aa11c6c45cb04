//! Round orchestration: client sampling, decoupled local training (balanced
//! classifier, local classifier, extractor with feature alignment), server-side
//! clustering and aggregation, plus the FedAvg and Decoupled baselines.

use std::sync::Arc;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::cluster::{
    cluster_all_classes, rand_index, ClassClassifierSet, ClusterAssignment, DistanceMatrix,
};
use crate::data::{batch_of, label_entropy, sample_balanced_batch, ClientView, DriftSchedule};
use crate::error::{Error, Result};
use crate::nn::{
    alignment_loss_grad, forward_classifier, forward_extractor, sgd_step, task_loss_grad,
    FeatureBatch, ModelParams, OptimizerState, UpdateMask,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    FedCcfa,
    FedAvg,
    Decoupled,
    DecoupledClustering,
}

impl Variant {
    pub fn uses_clustering(self) -> bool {
        matches!(self, Variant::FedCcfa | Variant::DecoupledClustering)
    }

    pub fn uses_alignment(self) -> bool {
        matches!(self, Variant::FedCcfa)
    }

    pub fn is_decoupled(self) -> bool {
        !matches!(self, Variant::FedAvg)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fedccfa" => Ok(Self::FedCcfa),
            "fedavg" => Ok(Self::FedAvg),
            "decoupled" => Ok(Self::Decoupled),
            "decoupled_clustering" => Ok(Self::DecoupledClustering),
            other => Err(Error::Config(format!("unknown variant '{other}'"))),
        }
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::FedCcfa => "fedccfa",
            Self::FedAvg => "fedavg",
            Self::Decoupled => "decoupled",
            Self::DecoupledClustering => "decoupled_clustering",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ClusteringInput {
    Balanced,
    Local,
    Oracle,
}

impl std::str::FromStr for ClusteringInput {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "balanced" => Ok(Self::Balanced),
            "local" => Ok(Self::Local),
            "oracle" => Ok(Self::Oracle),
            other => Err(Error::Config(format!("unknown clustering input '{other}'"))),
        }
    }
}

impl std::fmt::Display for ClusteringInput {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Balanced => "balanced",
            Self::Local => "local",
            Self::Oracle => "oracle",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AnchorMode {
    Clustered,
    Global,
    Off,
}

impl std::str::FromStr for AnchorMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "clustered" => Ok(Self::Clustered),
            "global" => Ok(Self::Global),
            "off" => Ok(Self::Off),
            other => Err(Error::Config(format!("unknown anchor mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for AnchorMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Clustered => "clustered",
            Self::Global => "global",
            Self::Off => "off",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AlignmentWeight {
    /// entropy / gamma
    Adaptive { gamma: f64 },
    Fixed { lambda: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AggregationMode {
    Uniform,
    Weighted,
}

impl std::str::FromStr for AggregationMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(Self::Uniform),
            "weighted" => Ok(Self::Weighted),
            other => Err(Error::Config(format!("unknown aggregation mode '{other}'"))),
        }
    }
}

impl std::fmt::Display for AggregationMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Uniform => "uniform",
            Self::Weighted => "weighted",
        })
    }
}

/// Everything the round loop needs to know about the algorithm under test.
#[derive(Debug, Clone, PartialEq)]
pub struct AlgorithmConfig {
    pub variant: Variant,
    pub clustering_input: ClusteringInput,
    pub anchor_mode: AnchorMode,
    pub alignment_weight: AlignmentWeight,
    pub aggregation: AggregationMode,
    /// round at which feature alignment starts (T_s)
    pub alignment_start: usize,
    /// local epochs for extractor training (E)
    pub local_epochs: usize,
    /// iterations of balanced classifier training (s)
    pub balanced_iters: usize,
    /// samples per class in the balanced batch
    pub per_class_batch: usize,
    pub eta_theta: f64,
    pub eta_phi: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub dbscan_eps: f64,
    pub dbscan_min_samples: usize,
    pub temperature: f64,
    /// fraction of clients selected each round, in (0, 1]
    pub participation: f64,
    pub local_batch_size: usize,
}

impl Default for AlgorithmConfig {
    fn default() -> Self {
        Self {
            variant: Variant::FedCcfa,
            clustering_input: ClusteringInput::Balanced,
            anchor_mode: AnchorMode::Clustered,
            alignment_weight: AlignmentWeight::Adaptive { gamma: 20.0 },
            aggregation: AggregationMode::Uniform,
            alignment_start: 20,
            local_epochs: 5,
            balanced_iters: 5,
            per_class_batch: 5,
            eta_theta: 0.01,
            eta_phi: 0.1,
            momentum: 0.9,
            weight_decay: 1e-5,
            dbscan_eps: 0.1,
            dbscan_min_samples: 1,
            temperature: 0.5,
            participation: 1.0,
            local_batch_size: 32,
        }
    }
}

/// Final linear layer owned by one client.
#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    /// class_count x hidden_dim
    pub weights: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Classifier {
    pub fn from_params(params: &ModelParams) -> Self {
        Self { weights: params.classifier_weights.clone(), bias: params.classifier_bias.clone() }
    }

    pub fn apply_to(&self, params: &mut ModelParams) {
        params.classifier_weights = self.weights.clone();
        params.classifier_bias = self.bias.clone();
    }
}

/// Per-class anchor vectors; `None` marks a class the owner holds no samples of.
pub type AnchorSet = Vec<Option<Array1<f64>>>;

/// Stack a complete anchor set into a class_count x hidden_dim matrix, or None
/// if any class anchor is absent.
pub fn anchors_as_matrix(anchors: &AnchorSet, hidden_dim: usize) -> Option<Array2<f64>> {
    let mut m = Array2::zeros((anchors.len(), hidden_dim));
    for (c, anchor) in anchors.iter().enumerate() {
        m.row_mut(c).assign(anchor.as_ref()?);
    }
    Some(m)
}

#[derive(Debug, Clone)]
pub struct ClientState {
    pub view: ClientView,
    /// local classifier, persisted across rounds
    pub classifier: Classifier,
    /// cluster anchors delivered at the end of the previous round
    pub anchors: Option<AnchorSet>,
}

impl ClientState {
    pub fn client_id(&self) -> usize {
        self.view.client_id
    }
}

#[derive(Debug, Clone)]
pub struct ServerState {
    /// global extractor (classifier blocks unused between rounds for decoupled variants)
    pub model: ModelParams,
    /// frozen copy of the initial classifier, broadcast every round
    pub initial_classifier: Classifier,
    pub round: usize,
}

impl ServerState {
    pub fn new(initial: ModelParams) -> Self {
        let initial_classifier = Classifier::from_params(&initial);
        Self { model: initial, initial_classifier, round: 0 }
    }
}

/// What one client sends back to the server after local training.
#[derive(Debug, Clone)]
pub struct ClientUpdate {
    pub client_id: usize,
    /// extractor after local training (classifier blocks hold the trained local
    /// classifier, so the full struct doubles as the FedAvg model update)
    pub params: ModelParams,
    /// balanced classifier signature, when the variant clusters on it
    pub balanced_classifier: Option<Classifier>,
    pub local_anchors: AnchorSet,
    pub sample_count: usize,
    pub entropy: f64,
    pub alignment_weight: f64,
}

fn epoch_batches<R: Rng>(
    view: &ClientView,
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<FeatureBatch>> {
    let mut order = view.indices.clone();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .map(|chunk| batch_of(view, chunk))
        .collect()
}

/// One client's local round. Pure in its inputs; the rng must be derived from
/// (master seed, client id, round) by the caller.
pub fn client_round(
    client: &ClientState,
    global: &ModelParams,
    initial_classifier: &Classifier,
    config: &AlgorithmConfig,
    round: usize,
    rng: &mut ChaCha8Rng,
) -> Result<ClientUpdate> {
    let entropy = label_entropy(&client.view);
    let mut params = global.clone();
    let sample_count = client.view.len();

    if config.variant == Variant::FedAvg {
        // joint training of the whole model on the task loss
        let mut opt = OptimizerState::new(&params, config.eta_theta, config.momentum, config.weight_decay);
        for _ in 0..config.local_epochs {
            for batch in epoch_batches(&client.view, config.local_batch_size, rng)? {
                let (_, grads) = task_loss_grad(&params, &batch, true, true)?;
                sgd_step(&mut params, &grads, &mut opt, UpdateMask::ALL);
            }
        }
        check_finite(&params, client.client_id(), round)?;
        return Ok(ClientUpdate {
            client_id: client.client_id(),
            params,
            balanced_classifier: None,
            local_anchors: vec![None; global.class_count()],
            sample_count,
            entropy,
            alignment_weight: 0.0,
        });
    }

    // (a) balanced classifier: restart from the initial classifier and take s
    // steps on one balanced batch, extractor frozen
    let balanced_classifier = if config.variant.uses_clustering()
        && config.clustering_input == ClusteringInput::Balanced
        && config.balanced_iters > 0
    {
        initial_classifier.apply_to(&mut params);
        let batch = sample_balanced_batch(&client.view, config.per_class_batch, rng)?;
        let mut opt =
            OptimizerState::new(&params, config.eta_phi, config.momentum, config.weight_decay);
        for _ in 0..config.balanced_iters {
            let (_, grads) = task_loss_grad(&params, &batch, false, true)?;
            sgd_step(&mut params, &grads, &mut opt, UpdateMask::CLASSIFIER);
        }
        Some(Classifier::from_params(&params))
    } else {
        None
    };

    // (b) local classifier: restore last round's classifier, one epoch with the
    // extractor frozen; momentum state starts fresh each round
    client.classifier.apply_to(&mut params);
    let mut opt = OptimizerState::new(&params, config.eta_phi, config.momentum, config.weight_decay);
    for batch in epoch_batches(&client.view, config.local_batch_size, rng)? {
        let (_, grads) = task_loss_grad(&params, &batch, false, true)?;
        sgd_step(&mut params, &grads, &mut opt, UpdateMask::CLASSIFIER);
    }

    // (c) extractor: E epochs of task loss plus weighted alignment, classifier frozen
    let anchors_matrix = client
        .anchors
        .as_ref()
        .and_then(|anchors| anchors_as_matrix(anchors, global.hidden_dim()));
    let alignment_active = config.variant.uses_alignment()
        && config.anchor_mode != AnchorMode::Off
        && round >= config.alignment_start
        && anchors_matrix.is_some();
    let weight = if alignment_active {
        match config.alignment_weight {
            AlignmentWeight::Adaptive { gamma } => entropy / gamma,
            AlignmentWeight::Fixed { lambda } => lambda,
        }
    } else {
        0.0
    };
    let mut opt = OptimizerState::new(&params, config.eta_theta, config.momentum, config.weight_decay);
    for _ in 0..config.local_epochs {
        for batch in epoch_batches(&client.view, config.local_batch_size, rng)? {
            let (_, mut grads) = task_loss_grad(&params, &batch, true, false)?;
            if weight > 0.0 {
                let anchors = anchors_matrix.as_ref().expect("alignment_active implies anchors");
                let (_, align_grads) =
                    alignment_loss_grad(&params, &batch, anchors, config.temperature)?;
                grads.add_scaled(&align_grads, weight);
            }
            sgd_step(&mut params, &grads, &mut opt, UpdateMask::EXTRACTOR);
        }
    }
    check_finite(&params, client.client_id(), round)?;

    // (d) local anchors from the final extractor
    let local_anchors = compute_local_anchors(&client.view, &params)?;

    Ok(ClientUpdate {
        client_id: client.client_id(),
        params,
        balanced_classifier,
        local_anchors,
        sample_count,
        entropy,
        alignment_weight: weight,
    })
}

fn check_finite(params: &ModelParams, client_id: usize, round: usize) -> Result<()> {
    if params.all_finite() {
        Ok(())
    } else {
        Err(Error::Invariant(format!(
            "non-finite parameters after client {client_id} update at round {round}"
        )))
    }
}

/// Per-class mean feature vector over the client's samples of that class.
pub fn compute_local_anchors(view: &ClientView, params: &ModelParams) -> Result<AnchorSet> {
    let class_count = view.dataset.class_count;
    let hidden = params.hidden_dim();
    let mut sums = vec![Array1::<f64>::zeros(hidden); class_count];
    let mut counts = vec![0usize; class_count];
    let batch = batch_of(view, &view.indices)?;
    let features = forward_extractor(params, &batch.inputs)?;
    for (row, &label) in batch.labels.iter().enumerate() {
        sums[label] += &features.row(row);
        counts[label] += 1;
    }
    Ok(sums
        .into_iter()
        .zip(counts)
        .map(|(sum, count)| if count > 0 { Some(sum / count as f64) } else { None })
        .collect())
}

/// Sample-count-weighted mean of the extractor blocks, summed in
/// ascending client-id order. For FedAvg the classifier blocks are averaged the
/// same way by the caller.
pub fn aggregate_extractors(updates: &[ClientUpdate]) -> Result<ModelParams> {
    aggregate_params(updates, false)
}

/// Weighted mean over the full parameter struct (FedAvg path).
pub fn aggregate_full_models(updates: &[ClientUpdate]) -> Result<ModelParams> {
    aggregate_params(updates, true)
}

fn aggregate_params(updates: &[ClientUpdate], include_classifier: bool) -> Result<ModelParams> {
    if updates.is_empty() {
        return Err(Error::Invariant("aggregate over empty update set".into()));
    }
    let mut order: Vec<usize> = (0..updates.len()).collect();
    order.sort_by_key(|&i| updates[i].client_id);
    let total: f64 = updates.iter().map(|u| u.sample_count as f64).sum();
    let first = &updates[0].params;
    let mut acc = ModelParams::zeros(first.input_dim(), first.hidden_dim(), first.class_count());
    for &i in &order {
        let update = &updates[i];
        let w = update.sample_count as f64 / total;
        acc.extractor_weights.scaled_add(w, &update.params.extractor_weights);
        acc.extractor_bias.scaled_add(w, &update.params.extractor_bias);
        if include_classifier {
            acc.classifier_weights.scaled_add(w, &update.params.classifier_weights);
            acc.classifier_bias.scaled_add(w, &update.params.classifier_bias);
        }
    }
    Ok(acc)
}

/// Per-cluster per-class classifier rows. Each entry maps (class, cluster
/// member id) to the aggregated row (weights then bias).
#[derive(Debug, Clone)]
pub struct ClusteredClassifiers {
    /// per class: list of (member ids, row weights (hidden), bias)
    pub per_class: Vec<Vec<(Vec<usize>, Array1<f64>, f64)>>,
}

/// Aggregate member clients' trained class classifiers per cluster.
/// Uniform averages plainly; weighted weights members by their current-label
/// sample count of the class.
pub fn aggregate_classifiers(
    updates: &[ClientUpdate],
    class_counts: &dyn Fn(usize, usize) -> usize,
    assignment: &ClusterAssignment,
    mode: AggregationMode,
) -> Result<ClusteredClassifiers> {
    let by_id = index_updates(updates);
    let class_count = assignment.per_class.len();
    let mut per_class = Vec::with_capacity(class_count);
    for (class, clusters) in assignment.per_class.iter().enumerate() {
        let mut rows = Vec::with_capacity(clusters.len());
        for members in clusters {
            let mut weight_sum = 0.0;
            let hidden = updates[0].params.hidden_dim();
            let mut acc = Array1::<f64>::zeros(hidden);
            let mut bias_acc = 0.0;
            for &member in members {
                let update = by_id
                    .get(&member)
                    .ok_or_else(|| Error::Invariant(format!("cluster member {member} missing update")))?;
                let w = match mode {
                    AggregationMode::Uniform => 1.0,
                    AggregationMode::Weighted => class_counts(member, class) as f64,
                };
                acc.scaled_add(w, &update.params.classifier_weights.row(class).to_owned());
                bias_acc += w * update.params.classifier_bias[class];
                weight_sum += w;
            }
            if weight_sum == 0.0 {
                // weighted mode with no member holding the class: fall back to uniform
                for &member in members {
                    let update = &by_id[&member];
                    acc += &update.params.classifier_weights.row(class);
                    bias_acc += update.params.classifier_bias[class];
                }
                weight_sum = members.len() as f64;
            }
            acc /= weight_sum;
            bias_acc /= weight_sum;
            rows.push((members.clone(), acc, bias_acc));
        }
        per_class.push(rows);
    }
    Ok(ClusteredClassifiers { per_class })
}

/// Uniform mean of member anchors per cluster, skipping absent anchors.
/// Returns, per class, (member ids, anchor or None when all members lack it).
pub fn aggregate_anchors(
    updates: &[ClientUpdate],
    assignment: &ClusterAssignment,
) -> Result<Vec<Vec<(Vec<usize>, Option<Array1<f64>>)>>> {
    let by_id = index_updates(updates);
    let mut out = Vec::with_capacity(assignment.per_class.len());
    for (class, clusters) in assignment.per_class.iter().enumerate() {
        let mut cluster_anchors = Vec::with_capacity(clusters.len());
        for members in clusters {
            let mut acc: Option<Array1<f64>> = None;
            let mut count = 0usize;
            for &member in members {
                let update = by_id
                    .get(&member)
                    .ok_or_else(|| Error::Invariant(format!("cluster member {member} missing update")))?;
                if let Some(anchor) = &update.local_anchors[class] {
                    match &mut acc {
                        Some(sum) => *sum += anchor,
                        None => acc = Some(anchor.clone()),
                    }
                    count += 1;
                }
            }
            let anchor = acc.map(|sum| sum / count as f64);
            cluster_anchors.push((members.clone(), anchor));
        }
        out.push(cluster_anchors);
    }
    Ok(out)
}

fn index_updates(updates: &[ClientUpdate]) -> std::collections::BTreeMap<usize, &ClientUpdate> {
    updates.iter().map(|u| (u.client_id, u)).collect()
}

/// Ground-truth per-class concept partition: clients share class c's concept
/// when the same base class feeds current label c under their permutations.
pub fn oracle_partition(clients: &[&ClientView], class_count: usize) -> ClusterAssignment {
    let mut per_class = Vec::with_capacity(class_count);
    for class in 0..class_count {
        let mut groups: std::collections::BTreeMap<usize, Vec<usize>> = Default::default();
        for view in clients {
            let source = view
                .permutation
                .iter()
                .position(|&target| target == class)
                .expect("permutation is a bijection");
            groups.entry(source).or_default().push(view.client_id);
        }
        let mut clusters: Vec<Vec<usize>> = groups.into_values().collect();
        for cluster in &mut clusters {
            cluster.sort_unstable();
        }
        clusters.sort_by_key(|cluster| cluster[0]);
        per_class.push(clusters);
    }
    ClusterAssignment { per_class }
}

/// Per-round observables persisted by the experiment driver.
#[derive(Debug, Clone)]
pub struct RoundMetrics {
    pub round: usize,
    pub mean_accuracy: f64,
    pub per_client_accuracy: Vec<f64>,
    pub extractor_delta_norm: f64,
    pub per_class_cluster_count: Vec<usize>,
    /// per-class Rand index vs the oracle partition; empty when clustering is off
    pub per_class_rand_index: Vec<f64>,
    pub mean_rand_index: Option<f64>,
    pub mean_alignment_weight: f64,
    /// set when any class fell back to raw pairwise distances (fewer than 3 clients)
    pub madd_fallback: bool,
    pub distance_matrices: Vec<DistanceMatrix>,
}

/// A full deterministic simulation: server, clients, drift schedule, test set.
pub struct Simulation {
    pub server: ServerState,
    pub clients: Vec<ClientState>,
    pub schedule: DriftSchedule,
    pub test_set: Arc<crate::data::LabeledDataset>,
    pub config: AlgorithmConfig,
    pub master_seed: u64,
    pub workers: usize,
}

fn derive_rng(master: u64, tags: &[u64]) -> ChaCha8Rng {
    // splitmix64 chain over the tag stream
    let mut state = master;
    for &tag in tags {
        state = state.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(tag);
        let mut z = state;
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        state = z ^ (z >> 31);
    }
    ChaCha8Rng::seed_from_u64(state)
}

impl Simulation {
    pub fn new(
        server: ServerState,
        clients: Vec<ClientState>,
        schedule: DriftSchedule,
        test_set: Arc<crate::data::LabeledDataset>,
        config: AlgorithmConfig,
        master_seed: u64,
        workers: usize,
    ) -> Self {
        Self { server, clients, schedule, test_set, config, master_seed, workers: workers.max(1) }
    }

    /// Uniform sample of ceil(fraction * K) clients, without replacement.
    fn select_clients(&self, round: usize) -> Vec<usize> {
        let k = self.clients.len();
        let count = ((self.config.participation * k as f64).ceil() as usize).clamp(1, k);
        let mut ids: Vec<usize> = (0..k).collect();
        let mut rng = derive_rng(self.master_seed, &[0xC1_1E57, round as u64]);
        ids.shuffle(&mut rng);
        ids.truncate(count);
        ids.sort_unstable();
        ids
    }

    /// Execute round t: drift, local training, aggregation, clustering, metrics.
    pub fn run_round(&mut self) -> Result<RoundMetrics> {
        let round = self.server.round;
        let config = self.config.clone();
        for client in &mut self.clients {
            client.view.set_round(&self.schedule, round);
        }
        let selected = self.select_clients(round);

        let global = self.server.model.clone();
        let initial_classifier = self.server.initial_classifier.clone();
        let master_seed = self.master_seed;
        let run_one = |&pos: &usize| -> Result<ClientUpdate> {
            let client = &self.clients[pos];
            let mut rng =
                derive_rng(master_seed, &[0xC0_FFEE, client.client_id() as u64, round as u64]);
            client_round(client, &global, &initial_classifier, &config, round, &mut rng)
        };
        let updates: Vec<ClientUpdate> = if self.workers > 1 {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(self.workers)
                .build()
                .map_err(|e| Error::Invariant(format!("thread pool: {e}")))?;
            pool.install(|| {
                use rayon::prelude::*;
                selected.par_iter().map(run_one).collect::<Result<Vec<_>>>()
            })?
        } else {
            selected.iter().map(run_one).collect::<Result<Vec<_>>>()?
        };

        // extractor (or full model) aggregation
        let previous_extractor = self.server.model.clone();
        if config.variant == Variant::FedAvg {
            self.server.model = aggregate_full_models(&updates)?;
            let shared = Classifier::from_params(&self.server.model);
            for &pos in &selected {
                self.clients[pos].classifier = shared.clone();
            }
        } else {
            let aggregated = aggregate_extractors(&updates)?;
            self.server.model.extractor_weights = aggregated.extractor_weights;
            self.server.model.extractor_bias = aggregated.extractor_bias;
            for update in &updates {
                let pos = self.position_of(update.client_id);
                self.clients[pos].classifier = Classifier::from_params(&update.params);
            }
        }
        let delta_norm = self.server.model.extractor_frobenius_distance(&previous_extractor);

        // clustering + clustered aggregation
        let mut per_class_cluster_count = Vec::new();
        let mut per_class_rand_index = Vec::new();
        let mut madd_fallback = false;
        let mut distance_matrices = Vec::new();
        if config.variant.uses_clustering() {
            let selected_views: Vec<&ClientView> =
                selected.iter().map(|&pos| &self.clients[pos].view).collect();
            let truth = oracle_partition(&selected_views, self.test_set.class_count);
            let assignment = match config.clustering_input {
                ClusteringInput::Oracle => truth.clone(),
                ClusteringInput::Balanced => {
                    let entries: Vec<(usize, ModelParams)> = updates
                        .iter()
                        .map(|u| {
                            let balanced = u.balanced_classifier.as_ref().ok_or_else(|| {
                                Error::Invariant(format!(
                                    "client {} produced no balanced classifier",
                                    u.client_id
                                ))
                            })?;
                            let mut p = u.params.clone();
                            balanced.apply_to(&mut p);
                            Ok((u.client_id, p))
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let refs: Vec<(usize, &ModelParams)> =
                        entries.iter().map(|(id, p)| (*id, p)).collect();
                    let set = ClassClassifierSet::from_models(&refs);
                    let (assignment, matrices) =
                        cluster_all_classes(&set, config.dbscan_eps, config.dbscan_min_samples)?;
                    madd_fallback = matrices.iter().any(|m| m.fallback);
                    distance_matrices = matrices;
                    assignment
                }
                ClusteringInput::Local => {
                    let refs: Vec<(usize, &ModelParams)> =
                        updates.iter().map(|u| (u.client_id, &u.params)).collect();
                    let set = ClassClassifierSet::from_models(&refs);
                    let (assignment, matrices) =
                        cluster_all_classes(&set, config.dbscan_eps, config.dbscan_min_samples)?;
                    madd_fallback = matrices.iter().any(|m| m.fallback);
                    distance_matrices = matrices;
                    assignment
                }
            };
            for (clusters, truth_clusters) in
                assignment.per_class.iter().zip(truth.per_class.iter())
            {
                per_class_cluster_count.push(clusters.len());
                per_class_rand_index.push(rand_index(clusters, truth_clusters));
            }

            let class_counts = |client_id: usize, class: usize| -> usize {
                let pos = selected
                    .iter()
                    .find(|&&p| self.clients[p].client_id() == client_id)
                    .copied()
                    .expect("selected client");
                self.clients[pos].view.label_histogram()[class]
            };
            let clustered =
                aggregate_classifiers(&updates, &class_counts, &assignment, config.aggregation)?;
            for (class, rows) in clustered.per_class.iter().enumerate() {
                for (members, weights, bias) in rows {
                    for &member in members {
                        let pos = self.position_of(member);
                        let clf = &mut self.clients[pos].classifier;
                        clf.weights.row_mut(class).assign(weights);
                        clf.bias[class] = *bias;
                    }
                }
            }

            // anchors for next round's alignment
            match config.anchor_mode {
                AnchorMode::Off => {}
                AnchorMode::Clustered => {
                    let anchor_clusters = aggregate_anchors(&updates, &assignment)?;
                    let class_count = self.test_set.class_count;
                    for update in &updates {
                        let pos = self.position_of(update.client_id);
                        let mut set: AnchorSet = vec![None; class_count];
                        for (class, clusters) in anchor_clusters.iter().enumerate() {
                            for (members, anchor) in clusters {
                                if members.contains(&update.client_id) {
                                    set[class] = anchor.clone();
                                }
                            }
                        }
                        self.clients[pos].anchors = Some(set);
                    }
                }
                AnchorMode::Global => {
                    // one cluster containing every selected client, per class
                    let all_ids: Vec<usize> =
                        updates.iter().map(|u| u.client_id).collect();
                    let global_assignment = ClusterAssignment {
                        per_class: vec![vec![all_ids]; self.test_set.class_count],
                    };
                    let anchor_clusters = aggregate_anchors(&updates, &global_assignment)?;
                    let set: AnchorSet = anchor_clusters
                        .iter()
                        .map(|clusters| clusters[0].1.clone())
                        .collect();
                    for update in &updates {
                        let pos = self.position_of(update.client_id);
                        self.clients[pos].anchors = Some(set.clone());
                    }
                }
            }
        }

        let per_client_accuracy = self.evaluate()?;
        let mean_accuracy =
            per_client_accuracy.iter().sum::<f64>() / per_client_accuracy.len() as f64;
        let mean_alignment_weight =
            updates.iter().map(|u| u.alignment_weight).sum::<f64>() / updates.len() as f64;
        let mean_rand_index = if per_class_rand_index.is_empty() {
            None
        } else {
            Some(per_class_rand_index.iter().sum::<f64>() / per_class_rand_index.len() as f64)
        };

        self.server.round += 1;
        Ok(RoundMetrics {
            round,
            mean_accuracy,
            per_client_accuracy,
            extractor_delta_norm: delta_norm,
            per_class_cluster_count,
            per_class_rand_index,
            mean_rand_index,
            mean_alignment_weight,
            madd_fallback,
            distance_matrices,
        })
    }

    fn position_of(&self, client_id: usize) -> usize {
        self.clients
            .iter()
            .position(|c| c.client_id() == client_id)
            .expect("client id present")
    }

    /// Generalized accuracy: each client classifies the whole test set relabeled
    /// under its own current permutation, using the global extractor and its own
    /// classifier.
    pub fn evaluate(&self) -> Result<Vec<f64>> {
        let features = forward_extractor(&self.server.model, &self.test_set.inputs)?;
        let mut accuracies = Vec::with_capacity(self.clients.len());
        for client in &self.clients {
            let mut params = self.server.model.clone();
            client.classifier.apply_to(&mut params);
            let logits = forward_classifier(&params, &features)?;
            let mut correct = 0usize;
            for (i, &base_label) in self.test_set.labels.iter().enumerate() {
                let truth = client.view.permutation[base_label];
                let pred = logits
                    .row(i)
                    .iter()
                    .enumerate()
                    .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                    .map(|(c, _)| c)
                    .unwrap();
                if pred == truth {
                    correct += 1;
                }
            }
            accuracies.push(correct as f64 / self.test_set.len() as f64);
        }
        Ok(accuracies)
    }
}
