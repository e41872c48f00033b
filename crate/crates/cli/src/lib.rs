//! Command-line orchestration over `rfssl-core`.

pub mod commands;
pub mod config;
pub mod plot;
pub mod rundir;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use rfssl_core::{ErrorCategory, InitSource, TrainMode};

pub use commands::run;
pub use config::ExperimentConfig;

#[derive(Debug, Parser)]
#[command(name = "rf-sslkit", version, about = "Self-supervised RF modulation recognition experiments")]
pub struct Cli {
    /// Experiment config (JSON). Omitted keys take their defaults.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Root for run directories.
    #[arg(long, global = true, env = "RF_SSLKIT_OUTPUT")]
    pub output_dir: Option<PathBuf>,
    /// Global seed inherited by every section that sets none.
    #[arg(long = "global-seed", global = true)]
    pub global_seed: Option<u64>,
    /// Log progress (repeat for more detail).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a dataset into the container format.
    Generate(GenerateArgs),
    /// Write stratified train/validation/test ids.
    Split(SplitArgs),
    /// Momentum-contrast pretraining on the unlabeled pool.
    Pretrain(PretrainArgs),
    /// Supervised fine-tuning or linear probing.
    Finetune(FinetuneArgs),
    /// Score a fine-tuned checkpoint on the test ids.
    Evaluate(EvaluateArgs),
    /// Fine-tune and evaluate across label fractions, inits and seeds.
    Sweep(SweepArgs),
    /// Render accuracy-vs-SNR and sample-efficiency figures.
    Plot(PlotArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Generate(_) => "generate",
            Command::Split(_) => "split",
            Command::Pretrain(_) => "pretrain",
            Command::Finetune(_) => "finetune",
            Command::Evaluate(_) => "evaluate",
            Command::Sweep(_) => "sweep",
            Command::Plot(_) => "plot",
        }
    }
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub examples_per_cell: Option<usize>,
    /// Comma-separated class names, e.g. BPSK,QPSK.
    #[arg(long, value_delimiter = ',')]
    pub classes: Option<Vec<String>>,
    /// Comma-separated SNRs in dB.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    pub snr_grid: Option<Vec<i32>>,
    #[arg(long)]
    pub seed: Option<u64>,
}

/// Where the data comes from: a container directory or an upstream pickle.
/// Without `--data` the config's dataset section decides.
#[derive(Debug, Args)]
pub struct DataArgs {
    #[arg(long)]
    pub data: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SplitArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub test_fraction: Option<f64>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Split ids file; recomputed from the config when omitted.
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub tau: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub projection_width: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub data: DataArgs,
    #[arg(long)]
    pub split: Option<PathBuf>,
    #[arg(long, value_parser = parse_init)]
    pub init: Option<InitSource>,
    /// Pretraining checkpoint directory.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub train_fraction: Option<f64>,
    #[arg(long, value_parser = parse_mode)]
    pub mode: Option<TrainMode>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Fine-tuned checkpoint directory.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Split ids; defaults to the `split.json` next to the checkpoint.
    #[arg(long)]
    pub split: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub data: DataArgs,
    /// Pretraining checkpoint; required when the SSL init is swept.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    pub fractions: Option<Vec<f64>>,
    #[arg(long, value_delimiter = ',')]
    pub seeds: Option<Vec<u64>>,
    #[arg(long, value_delimiter = ',', value_parser = parse_init)]
    pub inits: Option<Vec<InitSource>>,
}

#[derive(Debug, Args)]
pub struct PlotArgs {
    /// `eval_report.json` to draw, optionally `PATH=LABEL`.
    #[arg(long = "report")]
    pub reports: Vec<String>,
    /// Sweep run directory (holding `sweep.csv` and per-run reports).
    #[arg(long)]
    pub sweep: Option<PathBuf>,
}

fn parse_init(s: &str) -> Result<InitSource, String> {
    match s {
        "ssl" | "ssl_checkpoint" => Ok(InitSource::SslCheckpoint),
        "xavier" => Ok(InitSource::Xavier),
        _ => Err(format!("unknown init {s:?} (expected ssl or xavier)")),
    }
}

fn parse_mode(s: &str) -> Result<TrainMode, String> {
    match s {
        "e2e" | "end_to_end" => Ok(TrainMode::EndToEnd),
        "probe" | "linear_probe" => Ok(TrainMode::LinearProbe),
        _ => Err(format!("unknown mode {s:?} (expected e2e or probe)")),
    }
}

/// Process exit status for a failure category.
pub fn exit_code(category: ErrorCategory) -> i32 {
    match category {
        ErrorCategory::Config => 2,
        ErrorCategory::Data => 3,
        ErrorCategory::Divergence => 4,
        ErrorCategory::Leakage => 5,
    }
}
