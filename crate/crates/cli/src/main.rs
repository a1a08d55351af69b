//! `semiseg`: synthetic data, three-stage training, sliding-window
//! inference, evaluation and the inference sweep.
//!
//! Exit codes: 0 on success, 2 for configuration or stage-handoff errors
//! (including bad flags), 3 for data and file errors.

mod commands;
mod dataset;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dataset::Split;
use semiseg_core::Error;

#[derive(Parser, Debug)]
#[command(name = "semiseg", version, about = "Semi-supervised 3D segmentation toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic dataset directory with a split manifest.
    Synth(SynthArgs),
    /// Print a default run config as JSON.
    Config(ConfigArgs),
    /// Stage 1: reconstruction pre-training on every case.
    Pretrain(TrainArgs),
    /// Stage 2: consistency regularization.
    TrainCr(TrainArgs),
    /// Stage 3: consistency regularization plus pseudo labels.
    TrainPl(TrainArgs),
    /// Sliding-window prediction of every case in a split.
    Infer(InferArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Time and score inference over step fractions and mirror sets.
    Sweep(SweepArgs),
    /// Run the synthetic three-stage experiment and its supervised baseline.
    Toy(ToyArgs),
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 30)]
    pub cases: usize,
    #[arg(long, default_value_t = 1.0)]
    pub labeled_fraction: f64,
    /// Grid size: one number for a cube or `D,H,W`.
    #[arg(long, default_value = "32")]
    pub extent: String,
    /// Number of classes including background.
    #[arg(long, default_value_t = 3)]
    pub classes: usize,
    #[arg(long, default_value_t = 3)]
    pub teeth_per_case: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Preset {
    /// 4-stage model with 32³ patches.
    Test,
    /// 7-stage model with the full-size patch.
    Full,
}

#[derive(Args, Debug)]
pub struct ConfigArgs {
    #[arg(long, value_parser = parse_stage, default_value = "cr")]
    pub stage: semiseg_core::objectives::Stage,
    #[arg(long, value_enum, default_value_t = Preset::Test)]
    pub preset: Preset,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Run config JSON; defaults to the test preset (or the model of `--init`).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset directory written by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    /// Run directory: config.json, log.jsonl, final/ and best/ checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    /// Checkpoint directory of the previous stage.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Allow a missing `--init` for stages that expect one.
    #[arg(long)]
    pub from_scratch: bool,
    /// Accept an `--init` checkpoint of any stage.
    #[arg(long)]
    pub force: bool,
    /// Override `total_epochs`.
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Override `iterations_per_epoch`.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Override the run seed.
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Args, Debug)]
pub struct InferenceArgs {
    #[arg(long, default_value_t = 0.5)]
    pub step_fraction: f64,
    /// Comma-separated spatial axes to mirror, e.g. `1,2`; empty for none.
    #[arg(long, default_value = "")]
    pub mirror_axes: String,
    /// Stitching weights: `gaussian` or `uniform`.
    #[arg(long, default_value = "gaussian")]
    pub weighting: String,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Dataset directory or a plain directory of case files.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Val)]
    pub split: Split,
    #[command(flatten)]
    pub inference: InferenceArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Directory of predicted labels written by `infer`.
    #[arg(long)]
    pub pred: PathBuf,
    /// Dataset directory (or plain directory) holding the ground truth.
    #[arg(long)]
    pub gt: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Val)]
    pub split: Split,
    #[arg(long, default_value_t = semiseg_core::metrics::DEFAULT_NSD_TOLERANCE_MM)]
    pub tolerance_mm: f64,
    /// Output directory for metrics.csv and metrics.json.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, value_enum, default_value_t = Split::Val)]
    pub split: Split,
    /// Comma-separated step fractions.
    #[arg(long, default_value = "0.5,0.6,0.7,0.8,0.9,1.0")]
    pub step_fractions: String,
    /// Mirror sets separated by `;`, each a comma list (`""` for none).
    /// Defaults to all 8 subsets of {0,1,2}.
    #[arg(long)]
    pub mirror_sets: Option<String>,
    #[arg(long, default_value_t = 1)]
    pub repetitions: usize,
    #[arg(long, default_value = "gaussian")]
    pub weighting: String,
    #[arg(long, default_value_t = semiseg_core::metrics::DEFAULT_NSD_TOLERANCE_MM)]
    pub tolerance_mm: f64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct ToyArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Override iterations per epoch.
    #[arg(long)]
    pub iterations: Option<usize>,
    /// Override the stage epochs as `pretrain,cr,pl`.
    #[arg(long)]
    pub epochs: Option<String>,
    /// Write the result JSON here as well as to stdout.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_stage(s: &str) -> Result<semiseg_core::objectives::Stage, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// 2 for configuration problems, 3 for data problems.
fn exit_code(err: &anyhow::Error) -> u8 {
    match err.chain().find_map(|e| e.downcast_ref::<Error>()) {
        Some(Error::Config(_) | Error::Stage(_)) => 2,
        _ => 3,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(&a),
        Command::Config(a) => commands::config(&a),
        Command::Pretrain(a) => commands::train(semiseg_core::objectives::Stage::Pretrain, &a),
        Command::TrainCr(a) => commands::train(semiseg_core::objectives::Stage::Cr, &a),
        Command::TrainPl(a) => commands::train(semiseg_core::objectives::Stage::Pl, &a),
        Command::Infer(a) => commands::infer(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Sweep(a) => commands::sweep(&a),
        Command::Toy(a) => commands::toy(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
