use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;

/// Partially relevant video retrieval with a dual-branch student.
#[derive(Parser)]
#[command(name = "prvr", version, about)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with planted relevant moments.
    Synth {
        /// JSON file with the synthetic dataset recipe.
        #[arg(long)]
        spec: PathBuf,
        /// Output dataset directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train both branches and keep the best checkpoint by validation SumR.
    Train {
        /// JSON run config: training fields plus optional "data" and "out".
        #[arg(long)]
        config: Option<PathBuf>,
        /// Dataset directory (overrides "data" in the config).
        #[arg(long)]
        data: Option<PathBuf>,
        /// Output directory (overrides "out" in the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Epochs before which to save a model snapshot, e.g. 0,5,10.
        #[arg(long, value_delimiter = ',')]
        snapshot_epochs: Vec<usize>,
    },
    /// Evaluate a checkpoint: recall, M/V groups, margins, complementarity.
    Eval {
        /// Checkpoint file.
        #[arg(long)]
        model: PathBuf,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Fusion weight of the exploration branch; defaults to the one
        /// stored in the checkpoint.
        #[arg(long)]
        sigma: Option<f64>,
        /// Number of equal-count M/V bins.
        #[arg(long, default_value_t = 4)]
        mv_bins: usize,
        /// Split to evaluate: train, val or test.
        #[arg(long, default_value = "test")]
        split: String,
        /// Directory for the JSON report and CSV exports.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Dump the soft targets of a fixed probe batch at saved epochs.
    InspectTargets {
        /// Run directory written by `prvr train`.
        #[arg(long)]
        model: PathBuf,
        /// Dataset directory.
        #[arg(long)]
        data: PathBuf,
        /// Snapshot epochs to inspect, e.g. 0,5,10.
        #[arg(long, value_delimiter = ',', required = true)]
        epochs: Vec<usize>,
        /// Pairs in the probe batch.
        #[arg(long, default_value_t = 8)]
        probe_size: usize,
        /// Output directory for the CSV matrices (default: <model>/targets).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth { spec, out } => commands::synth(&spec, &out),
        Command::Train {
            config,
            data,
            out,
            snapshot_epochs,
        } => commands::train(config.as_deref(), data, out, snapshot_epochs),
        Command::Eval {
            model,
            data,
            sigma,
            mv_bins,
            split,
            out,
        } => commands::eval(&model, &data, sigma, mv_bins, &split, out.as_deref()),
        Command::InspectTargets {
            model,
            data,
            epochs,
            probe_size,
            out,
        } => commands::inspect_targets(&model, &data, &epochs, probe_size, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("prvr: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
