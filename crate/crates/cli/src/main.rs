//! `ccdet`: generate a synthetic corpus, train with subject-level hold-out,
//! evaluate a saved model and render Eigen-CAM heatmaps.

mod commands;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Exit status for usage, validation and I/O problems.
const EXIT_USAGE: u8 = 2;
/// Exit status for numeric failures during training.
const EXIT_NUMERIC: u8 = 3;

#[derive(Parser)]
#[command(name = "ccdet", version, about = "Detector + Eigen-CAM pipeline for a synthetic two-class corpus")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic corpus (PNG images, masks, annotations.jsonl).
    Synth(SynthArgs),
    /// Run the hold-out protocol and write weights, logs and reports.
    Train(TrainArgs),
    /// Evaluate a saved model on a corpus or on one split's test subjects.
    Eval(EvalArgs),
    /// Render Eigen-CAM heatmaps for one image or a whole corpus.
    Cam(CamArgs),
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    /// Subjects per class.
    #[arg(long, default_value_t = 20)]
    subjects: usize,
    #[arg(long, default_value_t = 8)]
    slices: usize,
    #[arg(long, default_value_t = 128)]
    size: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

/// Configuration file plus `--set key=value` overrides.
#[derive(Args, Clone)]
struct ConfigArgs {
    /// JSON run configuration. Defaults apply to anything it omits.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one setting by dotted path, e.g. `--set train.lr=0.005`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    data: PathBuf,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long, default_value_t = 3)]
    rounds: usize,
    /// Shorthand for `--set train.epochs=N`.
    #[arg(long)]
    epochs: Option<usize>,
    /// Parent of the timestamped run directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    data: PathBuf,
    /// Split plan JSON written by `train`; only its test subjects are evaluated.
    #[arg(long)]
    split: Option<PathBuf>,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct CamArgs {
    #[arg(long)]
    model: PathBuf,
    /// A PNG image, or a corpus directory for batch mode.
    #[arg(long)]
    image: PathBuf,
    /// Comma-separated layer paths; defaults to the configured layers.
    #[arg(long, value_delimiter = ',')]
    layers: Vec<String>,
    /// Batch mode: restrict to this split's test subjects.
    #[arg(long)]
    split: Option<PathBuf>,
    /// Batch mode: restrict to one true class (`hc`, `apd`, 0 or 1).
    #[arg(long)]
    class: Option<String>,
    /// Batch mode: keep only images the model classifies correctly.
    #[arg(long)]
    correct_only: bool,
    #[command(flatten)]
    cfg: ConfigArgs,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<ccdet::Error>() {
        Some(ccdet::Error::Diverged { .. }) => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Cam(a) => commands::cam(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
