//! Deterministic desk-scale federated learning simulator built around
//! class-level classifier clustering and entropy-adaptive clustered feature
//! alignment, with a FedAvg baseline and decoupled-training variants, under
//! configurable non-IID partitions and label-swap concept drift.

pub mod cluster;
pub mod config;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fed;
pub mod idx;
pub mod nn;
pub mod plot;

pub use cluster::{ClassClassifierSet, ClusterAssignment, DistanceMatrix};
pub use config::{DatasetSource, ExperimentConfig};
pub use data::{DriftPattern, DriftSchedule, LabeledDataset, PartitionSpec, SwapRule};
pub use error::{Error, Result};
pub use experiment::{run_experiment, ExperimentOutput, ExperimentSummary};
pub use fed::{
    AggregationMode, AlgorithmConfig, AlignmentWeight, AnchorMode, ClientState, ClientUpdate,
    ClusteringInput, RoundMetrics, ServerState, Simulation, Variant,
};
pub use nn::{FeatureBatch, ModelParams, OptimizerState, UpdateMask};
