//! `bfm`: batch driver for data generation, pretraining, adaptation,
//! generation, evaluation and scaling-law fits.

mod commands;
mod error;
mod manifest;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::error::CliError;

/// Overrides every seed in the resolved configuration.
pub const ENV_SEED: &str = bfm_core::trainer::ENV_SEED;
/// Relative `--out` paths are resolved under this directory when set.
pub const ENV_OUT_ROOT: &str = "BFM_OUT_ROOT";

#[derive(Debug, Parser)]
#[command(name = "bfm", version, about = "Behavior sequence model toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic long-tail behavior corpus from a spec file.
    GenData(GenDataArgs),
    /// Pretrain a model on a corpus.
    Pretrain(PretrainArgs),
    /// Expand the vocabulary or move a checkpoint to another domain.
    Adapt(AdaptArgs),
    /// Generate future behavior sequences from context streams.
    Generate(GenerateArgs),
    /// Compute prediction (and optionally generation) metrics.
    Eval(EvalArgs),
    /// Train a model-size by data-size grid and fit the scaling law.
    Scaling(ScalingArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Synthetic corpus spec (TOML).
    #[arg(long)]
    pub spec: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Jsonl)]
    pub format: Format,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Jsonl,
    Csv,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ObjectiveArg {
    Ce,
    Dro,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum PriorArg {
    Corpus,
    Batch,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Corpus file (.jsonl or .csv).
    #[arg(long)]
    pub corpus: PathBuf,
    /// Vocabulary sidecar; defaults to `vocab.txt` beside the corpus.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Run config (TOML with optional [data], [model], [train] tables).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub objective: Option<ObjectiveArg>,
    #[arg(long)]
    pub epsilon: Option<f64>,
    #[arg(long, value_enum)]
    pub prior: Option<PriorArg>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub window: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Also write per-step robust-loss diagnostics.
    #[arg(long)]
    pub diagnostics: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AdaptMode {
    NewBehavior,
    CrossDomain,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum FreezeArg {
    None,
    Transformer,
    Head,
}

#[derive(Debug, Args)]
pub struct AdaptArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum)]
    pub mode: AdaptMode,
    /// Target-domain corpus used for fine-tuning.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Target vocabulary; defaults to `vocab.txt` beside the corpus.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Vocabulary the checkpoint was trained with (new-behavior mode);
    /// defaults to `vocab.txt` beside the checkpoint.
    #[arg(long)]
    pub source_vocab: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = FreezeArg::None)]
    pub freeze: FreezeArg,
    /// Keep output-projection entries of retained behaviors fixed.
    #[arg(long)]
    pub freeze_retained_head: bool,
    /// Fine-tuning steps after the transfer; 0 only writes the adapted
    /// checkpoint.
    #[arg(long, default_value_t = 0)]
    pub steps: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SamplerArg {
    Greedy,
    Temperature,
    TopK,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to `vocab.txt` beside the checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Corpus file whose user streams are the contexts.
    #[arg(long)]
    pub contexts: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 50)]
    pub horizon: usize,
    #[arg(long, value_enum, default_value_t = SamplerArg::TopK)]
    pub sampler: SamplerArg,
    #[arg(long, default_value_t = 1.0)]
    pub temperature: f64,
    #[arg(long, default_value_t = 10)]
    pub top_k: usize,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Use at most this many contexts.
    #[arg(long)]
    pub max_contexts: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum WeightingArg {
    PaperExact,
    SupportWeighted,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Defaults to `vocab.txt` beside the checkpoint.
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    /// Test corpus.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum, default_value_t = WeightingArg::PaperExact)]
    pub weighting: WeightingArg,
    /// Generated JSONL to score against the corpus marginal.
    #[arg(long)]
    pub generated: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScalingArgs {
    /// Preset name (tiny, desk, large) or grid spec TOML file.
    #[arg(long, default_value = "tiny")]
    pub grid: String,
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    #[arg(long)]
    pub vocab: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Refit an existing grid CSV instead of training.
    #[arg(long)]
    pub fit_only: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::GenData(a) => commands::gen_data(a),
        Command::Pretrain(a) => commands::pretrain(a),
        Command::Adapt(a) => commands::adapt(a),
        Command::Generate(a) => commands::generate(a),
        Command::Eval(a) => commands::eval(a),
        Command::Scaling(a) => commands::scaling(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

pub(crate) fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}
