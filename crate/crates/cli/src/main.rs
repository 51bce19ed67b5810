//! Command-line entry point tying scene generation, training, evaluation,
//! numerical verification, and plot emission together.
//!
//! Every artifact-producing subcommand writes a JSON run manifest next to
//! its outputs recording the command line, the fully resolved
//! configuration, the seed, the artifact paths, and the tool version.
//! Identical flags and seed produce byte-identical data, checkpoint, and
//! CSV artifacts; SVG output carries no timestamp metadata for the same
//! reason.

mod ablate_cmd;
mod checks;
mod config;
mod eval_cmd;
mod gen;
mod manifest;
mod plot;
mod train_cmd;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "spagnn",
    version,
    about = "Joint detection and probabilistic motion forecasting on synthetic traffic scenes"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a line-delimited scenario dataset.
    GenScenes(GenScenesArgs),
    /// Train one model variant; writes a checkpoint and a loss-trace CSV.
    Train(TrainArgs),
    /// Evaluate a trained checkpoint; writes a metrics CSV and a plot
    /// detail file.
    Eval(EvalArgs),
    /// Train and evaluate all five forecaster variants with shared seeds;
    /// writes a comparison CSV.
    Ablate(AblateArgs),
    /// Compare belief-propagation marginals against exact inference on
    /// random block-dominant models.
    GabpCheck(GabpCheckArgs),
    /// Run the finite-difference gradient battery over every
    /// differentiable kernel and the end-to-end scene loss.
    GradCheck(GradCheckArgs),
    /// Render an evaluation run as an SVG: PR curve plus per-scene
    /// trajectory rollouts with one-sigma ellipses.
    Plot(PlotArgs),
}

#[derive(Debug, Args)]
struct GenScenesArgs {
    /// Scene family: following, intersection, or mixed.
    #[arg(long, default_value = "mixed")]
    kind: String,
    /// Number of scenarios to generate.
    #[arg(long)]
    count: usize,
    /// Master seed; every record's seed derives from it.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset path (one JSON record per line).
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct TrainArgs {
    /// Training dataset produced by `gen-scenes`.
    #[arg(long)]
    data: PathBuf,
    /// Optional JSON config file; missing fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Forecaster variant: mlp-only, gnn-plain, gnn-global-box,
    /// gnn-relative-box, or full.
    #[arg(long, default_value = "full")]
    variant: String,
    /// Seed for parameter initialization and batch sampling.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for checkpoint.bin, trace.csv, and manifest.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Evaluation dataset produced by `gen-scenes`.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint written by `train` (its manifest.json must sit next to
    /// it; the model architecture is read from there).
    #[arg(long)]
    checkpoint: PathBuf,
    /// Common recall point for displacement and collision metrics.
    #[arg(long, default_value_t = 0.8)]
    recall: f64,
    /// Output directory for metrics.csv, metrics.detail.json, and
    /// manifest.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct AblateArgs {
    /// Dataset to split into train/held-out portions.
    #[arg(long)]
    data: PathBuf,
    /// Optional JSON config file applied to every variant.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Shared seed for all five variants.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory for ablation.csv, per-variant artifacts, and
    /// manifest.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct GabpCheckArgs {
    /// Maximum variable count per random model (each trial draws
    /// 2..=nodes).
    #[arg(long, default_value_t = 6)]
    nodes: usize,
    /// Number of random models to check.
    #[arg(long, default_value_t = 50)]
    trials: usize,
    /// Master seed for model generation.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct GradCheckArgs {
    /// Seed for the battery's random parameter draws.
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct PlotArgs {
    /// metrics.csv written by `eval`; its detail file must sit next to it.
    #[arg(long, value_name = "PATH")]
    eval_csv: PathBuf,
    /// Output SVG path.
    #[arg(long)]
    out: PathBuf,
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenScenes(args) => gen::run(&args),
        Command::Train(args) => train_cmd::run(&args),
        Command::Eval(args) => eval_cmd::run(&args),
        Command::Ablate(args) => ablate_cmd::run(&args),
        Command::GabpCheck(args) => checks::gabp(&args),
        Command::GradCheck(args) => checks::gradients(&args),
        Command::Plot(args) => plot::run(&args),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::FAILURE
        }
    }
}
