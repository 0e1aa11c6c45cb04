//! Experiment driver: builds a simulation per seed, runs the round loop,
//! persists metrics.csv, distance-matrix dumps and a summary line.

use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::{DatasetSource, ExperimentConfig};
use crate::data::{
    build_drift_schedule, dirichlet_partition, make_synthetic, ClientView, LabeledDataset,
    PartitionSpec,
};
use crate::error::{Error, Result};
use crate::fed::{Classifier, ClientState, RoundMetrics, ServerState, Simulation};
use crate::idx::load_idx;
use crate::nn::ModelParams;

/// Format with 6 significant digits, fixed notation.
pub fn fmt_sig(x: f64) -> String {
    if x == 0.0 {
        return "0".to_string();
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let magnitude = x.abs().log10().floor() as i32;
    let precision = (5 - magnitude).clamp(0, 17) as usize;
    format!("{x:.precision$}")
}

#[derive(Debug, Clone, Serialize)]
pub struct ExperimentSummary {
    pub seeds: Vec<u64>,
    pub final_accuracies: Vec<f64>,
    pub mean_final_accuracy: f64,
    pub std_final_accuracy: f64,
}

#[derive(Debug)]
pub struct ExperimentOutput {
    pub metrics_path: PathBuf,
    pub summary_path: PathBuf,
    pub summary: ExperimentSummary,
    /// every round's metrics per seed, including rounds not written to CSV
    pub per_seed_metrics: Vec<Vec<RoundMetrics>>,
}

fn split_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(tag);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

fn build_datasets(
    config: &ExperimentConfig,
    seed: u64,
) -> Result<(Arc<LabeledDataset>, Arc<LabeledDataset>)> {
    match config.dataset {
        DatasetSource::Synthetic => {
            let train = make_synthetic(
                config.classes,
                config.input_dim,
                config.train_per_class,
                config.separation,
                config.noise,
                split_seed(seed, 1),
            )?;
            let test = make_synthetic(
                config.classes,
                config.input_dim,
                config.test_per_class,
                config.separation,
                config.noise,
                split_seed(seed, 2),
            )?;
            Ok((Arc::new(train), Arc::new(test)))
        }
        DatasetSource::Idx => {
            let train = load_idx(&config.idx_train_images, &config.idx_train_labels)?;
            let test = load_idx(&config.idx_test_images, &config.idx_test_labels)?;
            Ok((Arc::new(train), Arc::new(test)))
        }
    }
}

/// Build the simulation for one seed.
pub fn build_simulation(config: &ExperimentConfig, seed: u64) -> Result<Simulation> {
    let (train, test) = build_datasets(config, seed)?;
    let spec = PartitionSpec {
        client_count: config.clients,
        dirichlet_alpha: config.alpha,
        min_per_class: config.min_per_class,
        seed,
    };
    let parts = dirichlet_partition(&train, &spec)?;
    let mut init_rng = ChaCha8Rng::seed_from_u64(split_seed(seed, 3));
    let init = ModelParams::random_init(
        train.input_dim(),
        config.hidden_dim,
        train.class_count,
        &mut init_rng,
    );
    let server = ServerState::new(init.clone());
    let clients = parts
        .into_iter()
        .enumerate()
        .map(|(id, indices)| ClientState {
            view: ClientView::new(id, train.clone(), indices),
            classifier: Classifier::from_params(&init),
            anchors: None,
        })
        .collect();
    let schedule = build_drift_schedule(config.drift, config.rounds);
    Ok(Simulation::new(
        server,
        clients,
        schedule,
        test,
        config.resolved_algorithm(),
        seed,
        config.workers,
    ))
}

fn metrics_header(client_count: usize) -> String {
    let mut header = String::from("seed,round,mean_acc,frob_norm,rand_index,mean_align_weight");
    for k in 0..client_count {
        header.push_str(&format!(",acc_client_{k}"));
    }
    header
}

fn metrics_row(seed: u64, metrics: &RoundMetrics) -> Result<String> {
    for &acc in &metrics.per_client_accuracy {
        if !(0.0..=1.0).contains(&acc) {
            return Err(Error::Invariant(format!(
                "accuracy {acc} out of [0,1] at round {}",
                metrics.round
            )));
        }
    }
    let rand = metrics.mean_rand_index.map(fmt_sig).unwrap_or_default();
    let mut row = format!(
        "{},{},{},{},{},{}",
        seed,
        metrics.round,
        fmt_sig(metrics.mean_accuracy),
        fmt_sig(metrics.extractor_delta_norm),
        rand,
        fmt_sig(metrics.mean_alignment_weight),
    );
    for &acc in &metrics.per_client_accuracy {
        row.push(',');
        row.push_str(&fmt_sig(acc));
    }
    Ok(row)
}

fn dump_distance_matrices(
    out_dir: &std::path::Path,
    seed: u64,
    metrics: &RoundMetrics,
) -> Result<()> {
    for (class, matrix) in metrics.distance_matrices.iter().enumerate() {
        let path = out_dir.join(format!("dist_s{seed}_r{}_c{class}.csv", metrics.round));
        let mut file = std::fs::File::create(path)?;
        let header = matrix
            .client_ids
            .iter()
            .map(|id| id.to_string())
            .collect::<Vec<_>>()
            .join(",");
        writeln!(file, "{header}")?;
        for row in matrix.values.rows() {
            let line = row.iter().map(|v| format!("{v:.6}")).collect::<Vec<_>>().join(",");
            writeln!(file, "{line}")?;
        }
    }
    Ok(())
}

/// Run every seed sequentially, write metrics.csv and summary.jsonl under
/// `config.out_dir`, and return everything in memory as well.
pub fn run_experiment(config: &ExperimentConfig) -> Result<ExperimentOutput> {
    std::fs::create_dir_all(&config.out_dir)?;
    let metrics_path = config.out_dir.join("metrics.csv");
    let mut csv = String::new();
    csv.push_str(&metrics_header(config.clients));
    csv.push('\n');

    let mut final_accuracies = Vec::new();
    let mut per_seed_metrics = Vec::new();
    for &seed in &config.seeds {
        let mut sim = build_simulation(config, seed)?;
        let mut rounds = Vec::with_capacity(config.rounds);
        for round in 0..config.rounds {
            let metrics = sim.run_round()?;
            let evaluated = round % config.eval_interval == 0 || round + 1 == config.rounds;
            if evaluated {
                csv.push_str(&metrics_row(seed, &metrics)?);
                csv.push('\n');
                if config.dump_distances {
                    dump_distance_matrices(&config.out_dir, seed, &metrics)?;
                }
            }
            rounds.push(metrics);
        }
        final_accuracies.push(rounds.last().expect("rounds >= 1").mean_accuracy);
        per_seed_metrics.push(rounds);
    }
    std::fs::write(&metrics_path, csv)?;

    let n = final_accuracies.len() as f64;
    let mean = final_accuracies.iter().sum::<f64>() / n;
    let variance = final_accuracies.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / n;
    let summary = ExperimentSummary {
        seeds: config.seeds.clone(),
        final_accuracies,
        mean_final_accuracy: mean,
        std_final_accuracy: variance.sqrt(),
    };
    let summary_path = config.out_dir.join("summary.jsonl");
    let line = serde_json::to_string(&summary)
        .map_err(|e| Error::Invariant(format!("summary serialization: {e}")))?;
    std::fs::write(&summary_path, format!("{line}\n"))?;

    Ok(ExperimentOutput { metrics_path, summary_path, summary, per_seed_metrics })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fmt_sig_examples() {
        assert_eq!(fmt_sig(0.0), "0");
        assert_eq!(fmt_sig(0.123456789), "0.123457");
        assert_eq!(fmt_sig(12.3456789), "12.3457");
        assert_eq!(fmt_sig(123456.789), "123457");
    }

    fn tiny_config(dir: &std::path::Path) -> ExperimentConfig {
        let mut config = ExperimentConfig::parse(
            "clients=3\nclasses=3\ninput_dim=6\nhidden_dim=8\ntrain_per_class=30\n\
             test_per_class=10\nrounds=1\nseeds=1\nt_align=0",
        )
        .unwrap();
        config.out_dir = dir.to_path_buf();
        config
    }

    #[test]
    fn one_round_one_seed_writes_one_row() {
        let dir = tempfile::tempdir().unwrap();
        let config = tiny_config(dir.path());
        let out = run_experiment(&config).unwrap();
        let text = std::fs::read_to_string(&out.metrics_path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 2);
        assert!(lines[0].starts_with("seed,round,mean_acc,frob_norm,rand_index,mean_align_weight"));
        assert_eq!(lines[0].split(',').count(), 6 + 3);
        assert_eq!(lines[1].split(',').count(), 6 + 3);
    }

    #[test]
    fn three_seeds_summarize_three_finals() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_config(dir.path());
        config.seeds = vec![1, 2, 3];
        let out = run_experiment(&config).unwrap();
        assert_eq!(out.summary.final_accuracies.len(), 3);
        let text = std::fs::read_to_string(&out.summary_path).unwrap();
        assert_eq!(text.lines().count(), 1);
        assert!(text.contains("mean_final_accuracy"));
    }

    #[test]
    fn dump_writes_one_file_per_class() {
        let dir = tempfile::tempdir().unwrap();
        let mut config = tiny_config(dir.path());
        config.classes = 4;
        config.dump_distances = true;
        run_experiment(&config).unwrap();
        let dumps: Vec<_> = std::fs::read_dir(dir.path())
            .unwrap()
            .filter_map(|e| {
                let name = e.unwrap().file_name().into_string().unwrap();
                name.starts_with("dist_").then_some(name)
            })
            .collect();
        assert_eq!(dumps.len(), 4, "{dumps:?}");
    }

    #[test]
    fn rerun_is_byte_identical() {
        let dir_a = tempfile::tempdir().unwrap();
        let dir_b = tempfile::tempdir().unwrap();
        let mut config_a = tiny_config(dir_a.path());
        config_a.rounds = 3;
        let mut config_b = config_a.clone();
        config_b.out_dir = dir_b.path().to_path_buf();
        let out_a = run_experiment(&config_a).unwrap();
        let out_b = run_experiment(&config_b).unwrap();
        let bytes_a = std::fs::read(&out_a.metrics_path).unwrap();
        let bytes_b = std::fs::read(&out_b.metrics_path).unwrap();
        assert_eq!(bytes_a, bytes_b);
    }
}
