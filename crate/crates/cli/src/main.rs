use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use fedccfa::error::Error;
use fedccfa::{plot, ExperimentConfig};

/// Federated concept-drift simulator with classifier clustering and feature alignment.
#[derive(Parser)]
#[command(name = "fedccfa", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment described by a key=value config file.
    Run {
        /// path to the config file
        config: PathBuf,
    },
    /// Render metrics columns from one or more metrics.csv files as an SVG line chart.
    Plot {
        /// metrics.csv files to overlay
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        /// column to plot (e.g. mean_acc or frob_norm)
        #[arg(long)]
        series: String,
        /// output SVG path
        #[arg(long)]
        out: PathBuf,
    },
}

/// Exit codes: 0 success, 1 config error, 2 runtime failure.
fn exit_code_for(err: &Error) -> u8 {
    match err {
        Error::Config(_) => 1,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { config } => run(&config),
        Command::Plot { metrics, series, out } => {
            let paths: Vec<&std::path::Path> = metrics.iter().map(|p| p.as_path()).collect();
            plot::emit_plot(&paths, &series, &out)
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err}");
            ExitCode::from(exit_code_for(&err))
        }
    }
}

fn run(config_path: &std::path::Path) -> fedccfa::Result<()> {
    let mut config = ExperimentConfig::parse_file(config_path)?;
    if let Ok(dir) = std::env::var("FEDCCFA_OUT_DIR") {
        config.out_dir = PathBuf::from(dir);
    }
    let output = fedccfa::run_experiment(&config)?;
    println!(
        "wrote {} and {} (final accuracy {:.4} +/- {:.4} over {} seed{})",
        output.metrics_path.display(),
        output.summary_path.display(),
        output.summary.mean_final_accuracy,
        output.summary.std_final_accuracy,
        output.summary.seeds.len(),
        if output.summary.seeds.len() == 1 { "" } else { "s" },
    );
    Ok(())
}
