mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use dehaze_core::Error;

#[derive(Debug, Parser)]
#[command(name = "dehaze", version, about = "Synthetic haze, dehazing networks, training, evaluation and benchmarks")]
pub struct Cli {
    /// Seed overriding every seed in the config file.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML config with optional [model], [train], [synth] and [bench] tables.
    #[arg(long, global = true, env = "DEHAZE_CONFIG")]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Synthesize a hazy dataset from clean images and depth maps.
    Synth(SynthArgs),
    /// Train a model on a synthesized dataset.
    Train(TrainArgs),
    /// Dehaze images of any size with a trained checkpoint.
    Dehaze(DehazeArgs),
    /// Score a checkpoint on a dataset split, or score image pairs.
    Eval(EvalArgs),
    /// Time forward passes over resolutions and batch sizes.
    Bench(BenchArgs),
    /// Print per-module and total parameter counts.
    Params(ParamsArgs),
    /// Finite-difference gradient check of a small model in f64.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Directory of clean images.
    #[arg(long, required_unless_present = "procedural")]
    pub clean: Option<PathBuf>,
    /// Directory of depth maps (.fmap or 8-bit gray), matched by file stem.
    #[arg(long, required_unless_present = "procedural")]
    pub depth: Option<PathBuf>,
    /// Output directory; receives manifest.jsonl.
    #[arg(long)]
    pub out: PathBuf,
    /// Hazy variations per clean image.
    #[arg(long)]
    pub variations: Option<usize>,
    /// Generate N procedural scenes into OUT/source instead of reading --clean/--depth.
    #[arg(long, value_name = "N", conflicts_with_all = ["clean", "depth"])]
    pub procedural: Option<usize>,
    /// Procedural scene size.
    #[arg(long, value_name = "HxW", default_value = "64x64", value_parser = parse_size)]
    pub size: (usize, usize),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset manifest.jsonl.
    #[arg(long)]
    pub data: PathBuf,
    /// Model preset: small, big, dual, toy or toy-dual.
    #[arg(long)]
    pub model: Option<String>,
    /// Output directory for checkpoints and history.jsonl.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Early-stopping patience in epochs.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Base loss: mse, l1, ssim, content, mse_x1 or mse_x4.
    #[arg(long)]
    pub loss: Option<String>,
    /// Loss for a second, fine-tuning phase.
    #[arg(long)]
    pub refine_loss: Option<String>,
    #[arg(long)]
    pub refine_epochs: Option<usize>,
    /// Stage-wise schedule (dual models only).
    #[arg(long)]
    pub stagewise: bool,
    /// Start from this checkpoint instead of a fresh model.
    #[arg(long)]
    pub init: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DehazeArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Output directory; defaults to each input's directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Image files or directories of images.
    #[arg(required = true)]
    pub inputs: Vec<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long, requires = "data", conflicts_with = "pairs")]
    pub checkpoint: Option<PathBuf>,
    /// Dataset manifest.jsonl.
    #[arg(long, requires = "checkpoint")]
    pub data: Option<PathBuf>,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Score PRED_DIR against TRUTH_DIR, matched by sorted file order.
    #[arg(long, num_args = 2, value_names = ["PRED_DIR", "TRUTH_DIR"], required_unless_present = "checkpoint")]
    pub pairs: Option<Vec<PathBuf>>,
    /// Print the full report as JSON instead of the summary row.
    #[arg(long)]
    pub json: bool,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    /// Model preset to benchmark with fresh weights.
    #[arg(long, conflicts_with = "checkpoint")]
    pub model: Option<String>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Comma-separated HxW list.
    #[arg(long, value_delimiter = ',', value_parser = parse_size)]
    pub resolutions: Option<Vec<(usize, usize)>>,
    /// Comma-separated batch sizes.
    #[arg(long, value_delimiter = ',')]
    pub batches: Option<Vec<usize>>,
    #[arg(long)]
    pub runs: Option<usize>,
    #[arg(long)]
    pub warmup: Option<usize>,
    /// Skip cells whose estimated working set exceeds this many MiB.
    #[arg(long)]
    pub budget_mb: Option<usize>,
    /// Also write the report as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ParamsArgs {
    /// Model preset: small, big, dual, toy or toy-dual.
    #[arg(long)]
    pub model: Option<String>,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// toy or toy-dual.
    #[arg(long, default_value = "toy")]
    pub model: String,
    /// Square input size; must be a multiple of 32.
    #[arg(long, default_value_t = 32)]
    pub size: usize,
    /// Feature channels of the checked model.
    #[arg(long, default_value_t = 8)]
    pub features: usize,
    /// Entries checked per tensor.
    #[arg(long, default_value_t = 6)]
    pub samples: usize,
    /// Maximum relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
}

fn parse_size(s: &str) -> Result<(usize, usize), String> {
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(|| format!("expected HxW, got {s:?}"))?;
    let h: usize = h.trim().parse().map_err(|_| format!("bad height in {s:?}"))?;
    let w: usize = w.trim().parse().map_err(|_| format!("bad width in {s:?}"))?;
    if h == 0 || w == 0 {
        return Err(format!("size must be positive, got {s:?}"));
    }
    Ok((h, w))
}

/// Usage-class failures exit 2, everything else 1.
fn exit_code(e: &Error) -> u8 {
    match e {
        Error::MissingFile(_) | Error::Config(_) | Error::InvalidArgument(_) | Error::Manifest(_) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}
