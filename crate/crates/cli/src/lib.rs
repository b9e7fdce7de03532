//! Command-line front end for the shifted-shapes adaptation experiments.

pub mod commands;
pub mod config;
pub mod error;
pub mod manifest;
pub mod metrics;
pub mod report;
pub mod svg;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "ssda", version, about = "Self-supervised domain adaptation experiments on synthetic shapes")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a source/target dataset as IDX files.
    GenData(GenDataArgs),
    /// Train one method over several seeds.
    Train(TrainArgs),
    /// Sweep one loss weight, several seeds per value.
    Ablate(AblateArgs),
    /// Plot and summarize metrics CSV files.
    Report(ReportArgs),
    /// Write encoder features of a dataset to CSV.
    ExportFeatures(ExportArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub classes: Option<usize>,
    /// Examples per domain; overridden by --n-source / --n-target.
    #[arg(long)]
    pub n: Option<usize>,
    #[arg(long)]
    pub n_source: Option<usize>,
    #[arg(long)]
    pub n_target: Option<usize>,
    /// Shift severity in [0, 1], mapped onto hue, noise and texture.
    #[arg(long)]
    pub shift: Option<f64>,
    #[arg(long)]
    pub hue_shift: Option<f64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub texture: Option<u32>,
    #[arg(long)]
    pub size: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

/// Optimization flags shared by `train` and `ablate`.
#[derive(Debug, Args, Clone, Default)]
pub struct OptimArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Sets both batch sizes.
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub batch_size_source: Option<usize>,
    #[arg(long)]
    pub batch_size_target: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub momentum: Option<f64>,
    /// First seed; seeds run as seed, seed+1, ...
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub eval_every: Option<usize>,
    /// Concurrent trainings; defaults to the core count.
    #[arg(long)]
    pub jobs: Option<usize>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Keep real wall times and timestamps (outputs stop being reproducible).
    #[arg(long)]
    pub record_timing: bool,
    /// Continue past non-finite losses.
    #[arg(long)]
    pub no_strict: bool,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// source_only, rot, rot_entmin or full.
    #[arg(long)]
    pub method: Option<String>,
    #[arg(long)]
    pub lambda_p: Option<f64>,
    #[arg(long)]
    pub lambda_c: Option<f64>,
    #[arg(long)]
    pub lambda_e: Option<f64>,
    #[arg(long)]
    pub run_id: Option<String>,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    /// lambda_p, lambda_c or lambda_e.
    #[arg(long)]
    pub vary: Option<String>,
    /// Comma-separated values of the varied weight.
    #[arg(long)]
    pub values: Option<String>,
    #[arg(long)]
    pub lambda_p: Option<f64>,
    #[arg(long)]
    pub lambda_c: Option<f64>,
    #[arg(long)]
    pub lambda_e: Option<f64>,
    #[command(flatten)]
    pub optim: OptimArgs,
}

#[derive(Debug, Args)]
pub struct ReportArgs {
    /// Glob patterns of metrics CSV files.
    #[arg(required = true)]
    pub runs: Vec<String>,
    #[arg(long, default_value = "report")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Maximum rows per domain.
    #[arg(long)]
    pub limit: Option<usize>,
}

/// Runs a parsed command, returning the text for stdout.
pub fn run(cli: Cli) -> Result<String, CliError> {
    match cli.command {
        Command::GenData(a) => commands::gen_data(&a),
        Command::Train(a) => commands::train(&a),
        Command::Ablate(a) => commands::ablate(&a),
        Command::Report(a) => report::report(&a),
        Command::ExportFeatures(a) => commands::export_features(&a),
    }
}
