//! Flat key=value experiment configuration with documented defaults.

use std::path::{Path, PathBuf};

use crate::data::DriftPattern;
use crate::error::{Error, Result};
use crate::fed::{
    AggregationMode, AlgorithmConfig, AlignmentWeight, AnchorMode, ClusteringInput, Variant,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetSource {
    Synthetic,
    Idx,
}

impl std::str::FromStr for DatasetSource {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "synthetic" => Ok(Self::Synthetic),
            "idx" => Ok(Self::Idx),
            other => Err(Error::Config(format!("unknown dataset source '{other}'"))),
        }
    }
}

impl std::fmt::Display for DatasetSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Self::Synthetic => "synthetic",
            Self::Idx => "idx",
        })
    }
}

/// Full experiment description: algorithm, data, partition, drift and run plan.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub algorithm: AlgorithmConfig,
    pub align_mode_adaptive: bool,
    pub gamma: f64,
    pub lambda: f64,
    pub dataset: DatasetSource,
    pub classes: usize,
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    pub separation: f64,
    pub noise: f64,
    pub idx_train_images: PathBuf,
    pub idx_train_labels: PathBuf,
    pub idx_test_images: PathBuf,
    pub idx_test_labels: PathBuf,
    pub clients: usize,
    pub alpha: f64,
    pub min_per_class: usize,
    pub drift: DriftPattern,
    pub rounds: usize,
    pub eval_interval: usize,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
    pub dump_distances: bool,
    pub workers: usize,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            algorithm: AlgorithmConfig::default(),
            align_mode_adaptive: true,
            gamma: 20.0,
            lambda: 0.1,
            dataset: DatasetSource::Synthetic,
            classes: 10,
            input_dim: 16,
            hidden_dim: 32,
            train_per_class: 100,
            test_per_class: 50,
            separation: 4.0,
            noise: 0.5,
            idx_train_images: PathBuf::new(),
            idx_train_labels: PathBuf::new(),
            idx_test_images: PathBuf::new(),
            idx_test_labels: PathBuf::new(),
            clients: 10,
            alpha: 0.5,
            min_per_class: 5,
            drift: DriftPattern::None,
            rounds: 60,
            eval_interval: 1,
            seeds: vec![1, 2, 3],
            out_dir: PathBuf::from("out"),
            dump_distances: false,
            workers: 1,
        }
    }
}

fn parse_value<T: std::str::FromStr>(key: &str, value: &str, line: usize) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| {
        Error::Config(format!("line {line}: cannot parse '{value}' for key '{key}': {e}"))
    })
}

fn parse_bool(key: &str, value: &str, line: usize) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        other => Err(Error::Config(format!("line {line}: key '{key}' expects a bool, got '{other}'"))),
    }
}

impl ExperimentConfig {
    /// Parse the flat key=value format: one pair per line, '#' comments, unknown
    /// keys rejected, every key defaulted.
    pub fn parse(text: &str) -> Result<Self> {
        let mut config = Self::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = idx + 1;
            let content = raw.split('#').next().unwrap_or("").trim();
            if content.is_empty() {
                continue;
            }
            let (key, value) = content.split_once('=').ok_or_else(|| {
                Error::Config(format!("line {line}: expected key=value, got '{content}'"))
            })?;
            let key = key.trim();
            let value = value.trim();
            config.apply(key, value, line)?;
        }
        config.validate()?;
        Ok(config)
    }

    pub fn parse_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::parse(&text)
    }

    fn apply(&mut self, key: &str, value: &str, line: usize) -> Result<()> {
        let algo = &mut self.algorithm;
        match key {
            "variant" => algo.variant = parse_value::<Variant>(key, value, line)?,
            "clustering_input" => {
                algo.clustering_input = parse_value::<ClusteringInput>(key, value, line)?
            }
            "anchors" => algo.anchor_mode = parse_value::<AnchorMode>(key, value, line)?,
            "align_mode" => {
                self.align_mode_adaptive = match value {
                    "adaptive" => true,
                    "fixed" => false,
                    other => {
                        return Err(Error::Config(format!(
                            "line {line}: align_mode must be adaptive or fixed, got '{other}'"
                        )))
                    }
                }
            }
            "gamma" => self.gamma = parse_value(key, value, line)?,
            "lambda" => self.lambda = parse_value(key, value, line)?,
            "aggregation" => algo.aggregation = parse_value::<AggregationMode>(key, value, line)?,
            "t_align" => algo.alignment_start = parse_value(key, value, line)?,
            "epochs" => algo.local_epochs = parse_value(key, value, line)?,
            "balanced_iters" => algo.balanced_iters = parse_value(key, value, line)?,
            "per_class_batch" => algo.per_class_batch = parse_value(key, value, line)?,
            "eta_theta" => algo.eta_theta = parse_value(key, value, line)?,
            "eta_phi" => algo.eta_phi = parse_value(key, value, line)?,
            "momentum" => algo.momentum = parse_value(key, value, line)?,
            "weight_decay" => algo.weight_decay = parse_value(key, value, line)?,
            "eps" => algo.dbscan_eps = parse_value(key, value, line)?,
            "min_samples" => algo.dbscan_min_samples = parse_value(key, value, line)?,
            "tau" => algo.temperature = parse_value(key, value, line)?,
            "participation" => algo.participation = parse_value(key, value, line)?,
            "local_batch_size" => algo.local_batch_size = parse_value(key, value, line)?,
            "dataset" => self.dataset = parse_value::<DatasetSource>(key, value, line)?,
            "classes" => self.classes = parse_value(key, value, line)?,
            "input_dim" => self.input_dim = parse_value(key, value, line)?,
            "hidden_dim" => self.hidden_dim = parse_value(key, value, line)?,
            "train_per_class" => self.train_per_class = parse_value(key, value, line)?,
            "test_per_class" => self.test_per_class = parse_value(key, value, line)?,
            "separation" => self.separation = parse_value(key, value, line)?,
            "noise" => self.noise = parse_value(key, value, line)?,
            "idx_train_images" => self.idx_train_images = PathBuf::from(value),
            "idx_train_labels" => self.idx_train_labels = PathBuf::from(value),
            "idx_test_images" => self.idx_test_images = PathBuf::from(value),
            "idx_test_labels" => self.idx_test_labels = PathBuf::from(value),
            "clients" => self.clients = parse_value(key, value, line)?,
            "alpha" => self.alpha = parse_value(key, value, line)?,
            "min_per_class" => self.min_per_class = parse_value(key, value, line)?,
            "drift" => self.drift = parse_value::<DriftPattern>(key, value, line)?,
            "rounds" => self.rounds = parse_value(key, value, line)?,
            "eval_interval" => self.eval_interval = parse_value(key, value, line)?,
            "seeds" => {
                self.seeds = value
                    .split(',')
                    .map(|s| parse_value::<u64>(key, s.trim(), line))
                    .collect::<Result<Vec<_>>>()?
            }
            "out_dir" => self.out_dir = PathBuf::from(value),
            "dump_distances" => self.dump_distances = parse_bool(key, value, line)?,
            "workers" => self.workers = parse_value(key, value, line)?,
            other => {
                return Err(Error::Config(format!("line {line}: unknown key '{other}'")));
            }
        }
        Ok(())
    }

    fn validate(&self) -> Result<()> {
        if self.rounds < 1 {
            return Err(Error::Config("rounds must be >= 1".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("seeds must be nonempty".into()));
        }
        let p = self.algorithm.participation;
        if !(p > 0.0 && p <= 1.0) {
            return Err(Error::Config(format!("participation must be in (0, 1], got {p}")));
        }
        if self.alpha <= 0.0 {
            return Err(Error::Config("alpha must be > 0".into()));
        }
        if self.algorithm.temperature <= 0.0 {
            return Err(Error::Config("tau must be > 0".into()));
        }
        if self.clients < 1 {
            return Err(Error::Config("clients must be >= 1".into()));
        }
        if self.eval_interval < 1 {
            return Err(Error::Config("eval_interval must be >= 1".into()));
        }
        if self.dataset == DatasetSource::Synthetic && self.classes < 2 {
            return Err(Error::Config("classes must be >= 2".into()));
        }
        Ok(())
    }

    /// The alignment weight rule implied by align_mode/gamma/lambda.
    pub fn alignment_weight(&self) -> AlignmentWeight {
        if self.align_mode_adaptive {
            AlignmentWeight::Adaptive { gamma: self.gamma }
        } else {
            AlignmentWeight::Fixed { lambda: self.lambda }
        }
    }

    /// Algorithm config with the alignment weight rule resolved.
    pub fn resolved_algorithm(&self) -> AlgorithmConfig {
        AlgorithmConfig { alignment_weight: self.alignment_weight(), ..self.algorithm.clone() }
    }

    /// Inverse of `parse`: a key=value document that parses back to `self`.
    pub fn serialize(&self) -> String {
        let algo = &self.algorithm;
        let seeds = self
            .seeds
            .iter()
            .map(|s| s.to_string())
            .collect::<Vec<_>>()
            .join(",");
        let mut out = String::new();
        let mut push = |k: &str, v: String| {
            out.push_str(k);
            out.push('=');
            out.push_str(&v);
            out.push('\n');
        };
        push("variant", algo.variant.to_string());
        push("clustering_input", algo.clustering_input.to_string());
        push("anchors", algo.anchor_mode.to_string());
        push("align_mode", if self.align_mode_adaptive { "adaptive" } else { "fixed" }.to_string());
        push("gamma", self.gamma.to_string());
        push("lambda", self.lambda.to_string());
        push("aggregation", algo.aggregation.to_string());
        push("t_align", algo.alignment_start.to_string());
        push("epochs", algo.local_epochs.to_string());
        push("balanced_iters", algo.balanced_iters.to_string());
        push("per_class_batch", algo.per_class_batch.to_string());
        push("eta_theta", algo.eta_theta.to_string());
        push("eta_phi", algo.eta_phi.to_string());
        push("momentum", algo.momentum.to_string());
        push("weight_decay", algo.weight_decay.to_string());
        push("eps", algo.dbscan_eps.to_string());
        push("min_samples", algo.dbscan_min_samples.to_string());
        push("tau", algo.temperature.to_string());
        push("participation", algo.participation.to_string());
        push("local_batch_size", algo.local_batch_size.to_string());
        push("dataset", self.dataset.to_string());
        push("classes", self.classes.to_string());
        push("input_dim", self.input_dim.to_string());
        push("hidden_dim", self.hidden_dim.to_string());
        push("train_per_class", self.train_per_class.to_string());
        push("test_per_class", self.test_per_class.to_string());
        push("separation", self.separation.to_string());
        push("noise", self.noise.to_string());
        if !self.idx_train_images.as_os_str().is_empty() {
            push("idx_train_images", self.idx_train_images.display().to_string());
            push("idx_train_labels", self.idx_train_labels.display().to_string());
            push("idx_test_images", self.idx_test_images.display().to_string());
            push("idx_test_labels", self.idx_test_labels.display().to_string());
        }
        push("clients", self.clients.to_string());
        push("alpha", self.alpha.to_string());
        push("min_per_class", self.min_per_class.to_string());
        push("drift", self.drift.to_string());
        push("rounds", self.rounds.to_string());
        push("eval_interval", self.eval_interval.to_string());
        push("seeds", seeds);
        push("out_dir", self.out_dir.display().to_string());
        push("dump_distances", self.dump_distances.to_string());
        push("workers", self.workers.to_string());
        out
    }
}
