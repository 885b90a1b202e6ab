//! `scalebench`: pretraining, fine-tuning and resolution-robustness
//! evaluation from TOML configs.
//!
//! Exit codes: 0 success, 1 config or validation error, 2 FLOPs gate
//! failure, 3 non-finite training loss.

mod commands;
mod config;
mod plot;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use scalebench_core::dataset::Split;
use scalebench_core::flops::{FlopConvention, FlopsError};
use scalebench_core::metrics::EvalError;
use scalebench_train::assembly::{AssemblyError, Fusion};
use scalebench_train::finetune::FinetuneError;
use scalebench_train::pretrain::PretrainError;

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Config(String),
    #[error("{0}")]
    Gate(String),
    #[error("{0}")]
    NonFinite(String),
    #[error("{0:#}")]
    Other(#[from] anyhow::Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Other(_) => 1,
            CliError::Gate(_) => 2,
            CliError::NonFinite(_) => 3,
        }
    }
}

impl From<FlopsError> for CliError {
    fn from(e: FlopsError) -> Self {
        CliError::Config(e.to_string())
    }
}

impl From<AssemblyError> for CliError {
    fn from(e: AssemblyError) -> Self {
        match e {
            AssemblyError::Checkpoint(_) | AssemblyError::NotAnAssembly(_) => CliError::Other(e.into()),
            e => CliError::Config(e.to_string()),
        }
    }
}

impl From<EvalError> for CliError {
    fn from(e: EvalError) -> Self {
        match e {
            EvalError::GateFailed { .. } => CliError::Gate(e.to_string()),
            EvalError::Predict(_) => CliError::Other(e.into()),
            e => CliError::Config(e.to_string()),
        }
    }
}

impl From<FinetuneError> for CliError {
    fn from(e: FinetuneError) -> Self {
        match e {
            FinetuneError::NonFinite { .. } => CliError::NonFinite(e.to_string()),
            FinetuneError::Eval(e) => e.into(),
            FinetuneError::Assembly(e) => e.into(),
            e => CliError::Config(e.to_string()),
        }
    }
}

impl From<PretrainError> for CliError {
    fn from(e: PretrainError) -> Self {
        match e {
            PretrainError::NonFinite { .. } => CliError::NonFinite(e.to_string()),
            PretrainError::Io { .. } | PretrainError::Checkpoint(_) => CliError::Other(e.into()),
            e => CliError::Config(e.to_string()),
        }
    }
}

impl From<scalebench_core::manifest::ManifestError> for CliError {
    fn from(e: scalebench_core::manifest::ManifestError) -> Self {
        CliError::Other(e.into())
    }
}

#[derive(Parser)]
#[command(name = "scalebench", version, about = "Resolution-robustness benchmark and training toolkit for vision transformers")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Self-supervised pretraining with the overlap-mask branch.
    Pretrain(PretrainArgs),
    /// Fine-tune, then evaluate across scales.
    Finetune(FinetuneArgs),
    /// Evaluate a checkpoint (or the oracle) across scales.
    Evaluate(EvaluateArgs),
    /// FLOPs of one forward pass against the task budget.
    Flops(FlopsArgs),
    /// Comparison table over run manifests.
    Report(ReportArgs),
    /// Write a synthetic dataset to disk.
    Synth(SynthArgs),
}

/// Comma-separated scale factors, e.g. `1,2,4,8`.
#[derive(Clone, Debug)]
pub struct Factors(pub Vec<u32>);

fn parse_factors(s: &str) -> Result<Factors, String> {
    s.split(',')
        .map(|t| t.trim().parse::<u32>().map_err(|e| format!("bad factor `{t}`: {e}")))
        .collect::<Result<_, _>>()
        .map(Factors)
}

#[derive(Args)]
pub struct CommonArgs {
    /// Parent directory of run directories.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum FusionArg {
    Subtract,
    Concat,
}

impl From<FusionArg> for Fusion {
    fn from(f: FusionArg) -> Self {
        match f {
            FusionArg::Subtract => Fusion::Subtract,
            FusionArg::Concat => Fusion::Concat,
        }
    }
}

#[derive(Args)]
pub struct PretrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub scale_aug: bool,
    /// Stop after this many optimizer steps.
    #[arg(long)]
    pub max_steps: Option<usize>,
}

#[derive(Args)]
pub struct FinetuneArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[command(flatten)]
    pub common: CommonArgs,
    #[arg(long)]
    pub freeze: bool,
    #[arg(long)]
    pub scale_aug: bool,
    #[arg(long, value_enum)]
    pub fusion: Option<FusionArg>,
    /// Evaluation factors, e.g. `1,2,4,8`.
    #[arg(long, value_parser = parse_factors)]
    pub factors: Option<Factors>,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Defaults to a small synthetic change-detection test set.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Score a model that always returns the ground truth.
    #[arg(long)]
    pub oracle: bool,
    #[arg(long, value_parser = parse_factors)]
    pub factors: Option<Factors>,
    #[command(flatten)]
    pub common: CommonArgs,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum BackboneArg {
    Tiny,
    VitB16,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum TaskArg {
    Classification,
    ChangeDetection,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ConventionArg {
    MacAsOne,
    MacAsTwo,
}

impl From<ConventionArg> for FlopConvention {
    fn from(c: ConventionArg) -> Self {
        match c {
            ConventionArg::MacAsOne => FlopConvention::MacAsOne,
            ConventionArg::MacAsTwo => FlopConvention::MacAsTwo,
        }
    }
}

#[derive(Args)]
pub struct FlopsArgs {
    /// Run config whose `[model]` table is measured; overrides the shape flags.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "vit-b16")]
    pub backbone: BackboneArg,
    #[arg(long, default_value_t = 224)]
    pub image_size: usize,
    #[arg(long, value_enum, default_value = "classification")]
    pub task: TaskArg,
    #[arg(long, default_value_t = 10)]
    pub classes: usize,
    #[arg(long, value_enum)]
    pub fusion: Option<FusionArg>,
    #[arg(long, value_enum, default_value = "mac-as-one")]
    pub convention: ConventionArg,
    #[arg(long)]
    pub json: bool,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ReportFormat {
    Markdown,
    Csv,
}

#[derive(Args)]
pub struct ReportArgs {
    #[arg(required = true)]
    pub manifests: Vec<PathBuf>,
    #[arg(long, value_enum, default_value = "markdown")]
    pub format: ReportFormat,
    /// Also write the table here (must not exist).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Plot every run's curve into one SVG (must not exist).
    #[arg(long)]
    pub plot: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum SynthKind {
    Change,
    Scenes,
}

#[derive(Args)]
pub struct SynthArgs {
    /// Dataset root.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value = "change")]
    pub kind: SynthKind,
    #[arg(long, default_value_t = 500)]
    pub count: usize,
    #[arg(long, default_value_t = 64)]
    pub side: usize,
    #[arg(long, default_value_t = 4)]
    pub classes: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = "train")]
    pub split: Split,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Pretrain(a) => commands::pretrain_cmd(a),
        Command::Finetune(a) => commands::finetune(a),
        Command::Evaluate(a) => commands::evaluate(a),
        Command::Flops(a) => commands::flops(a),
        Command::Report(a) => commands::report_cmd(a),
        Command::Synth(a) => commands::synth(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
