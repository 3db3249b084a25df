mod commands;
mod config;
mod manifest;
mod store;

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

/// Net-flow intrusion detection: ingest, build joint datasets, train, evaluate.
#[derive(Debug, Parser)]
#[command(name = "flowdetect", version)]
pub struct Cli {
    /// Output directory; created if missing.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Seed; falls back to the config file, then FLOWDETECT_SEED, then 0.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML settings file; flags take precedence over it.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse CSV datasets against a schema manifest.
    Ingest(IngestArgs),
    /// Sample a joint train/validation corpus with per-source test sets.
    BuildMix(BuildMixArgs),
    /// Fit a tokenizer on the training split and fine-tune a model.
    Train(TrainArgs),
    /// Score a trained model on test sets, optionally perturbed.
    Eval(EvalArgs),
    /// Add numeric noise to a table.
    Perturb(PerturbArgs),
    /// Compare per-feature and subword token lengths and timing.
    Tokreport(TokreportArgs),
    /// Train and score every fine-tuning / tokenizer / adapter combination.
    Ablate(AblateArgs),
    /// Clean versus perturbed accuracy of a trained model.
    Robustness(RobustnessArgs),
    /// Write synthetic tables and a matching schema manifest.
    Synth(SynthArgs),
}

#[derive(Debug, Args)]
pub struct IngestArgs {
    /// Schema manifest (TOML, one [[dataset]] per source).
    #[arg(long)]
    pub manifest: PathBuf,
    /// CSV files as NAME=PATH, or PATH when the file stem names the dataset.
    #[arg(required = true)]
    pub inputs: Vec<String>,
}

#[derive(Debug, Args)]
pub struct BuildMixArgs {
    /// Table files or directories of tables.
    #[arg(long = "tables", required = true, num_args = 1..)]
    pub tables: Vec<PathBuf>,
    #[arg(long)]
    pub per_source: Option<usize>,
    #[arg(long)]
    pub test_per_source: Option<usize>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct TrainFlags {
    /// full-ft or lora.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long)]
    pub rank: Option<usize>,
    /// Comma-separated adapter targets (q,k,v,o,ff_in,ff_out).
    #[arg(long)]
    pub targets: Option<String>,
    /// Scale adapter updates by alpha/rank.
    #[arg(long)]
    pub lora_alpha: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Use the learning rate of the original pretrained-encoder setup.
    #[arg(long, conflicts_with = "lr")]
    pub pretrained_lr: bool,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub l2: Option<f64>,
    #[arg(long)]
    pub patience: Option<usize>,
    #[arg(long)]
    pub max_steps: Option<usize>,
    /// Comma-separated per-class loss weights, normal first.
    #[arg(long)]
    pub class_weights: Option<String>,
    #[arg(long)]
    pub dropout: Option<f64>,
    #[arg(long)]
    pub d_model: Option<usize>,
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub heads: Option<usize>,
    #[arg(long)]
    pub d_ff: Option<usize>,
}

#[derive(Debug, Args, Clone, Default)]
pub struct TokenizerFlags {
    /// nss or subword.
    #[arg(long)]
    pub tokenizer: Option<String>,
    /// raw or log-bucket[:N] (per-feature tokenizer only).
    #[arg(long)]
    pub quantization: Option<String>,
    #[arg(long)]
    pub subword_vocab: Option<usize>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory written by build-mix.
    #[arg(long)]
    pub mix: PathBuf,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub tokenizer: TokenizerFlags,
}

#[derive(Debug, Args, Clone, Default)]
pub struct PerturbFlags {
    /// Noise family: poisson, uniform, gaussian or laplace.
    #[arg(long = "perturb")]
    pub kind: Option<String>,
    /// Absolute scale or `auto` (per-column deviation; lambda 4 for poisson).
    #[arg(long)]
    pub scale: Option<String>,
    /// Seed for the noise stream; defaults to the run seed.
    #[arg(long)]
    pub perturb_seed: Option<u64>,
    /// Keep full float output instead of the cell's original precision.
    #[arg(long)]
    pub no_round: bool,
    /// Allow noise to push non-negative cells below zero.
    #[arg(long)]
    pub no_clip: bool,
}

#[derive(Debug, Args, Clone)]
pub struct TestSource {
    /// Directory written by build-mix; its test sets are used.
    #[arg(long, conflicts_with = "table")]
    pub mix: Option<PathBuf>,
    /// Restrict to one source of the mix.
    #[arg(long, requires = "mix")]
    pub source: Option<String>,
    /// A single table file instead of a mix.
    #[arg(long)]
    pub table: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory written by train.
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: TestSource,
    #[command(flatten)]
    pub perturb: PerturbFlags,
}

#[derive(Debug, Args)]
pub struct PerturbArgs {
    #[arg(long)]
    pub table: PathBuf,
    #[command(flatten)]
    pub perturb: PerturbFlags,
}

#[derive(Debug, Args)]
pub struct TokreportArgs {
    /// Table files or directories of tables.
    #[arg(long = "tables", required = true, num_args = 1..)]
    pub tables: Vec<PathBuf>,
    #[command(flatten)]
    pub tokenizer: TokenizerFlags,
    /// Also report lengths after each noise family.
    #[arg(long)]
    pub with_perturbations: bool,
    #[command(flatten)]
    pub perturb: PerturbFlags,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub mix: PathBuf,
    /// Score on one source's test set instead of all of them.
    #[arg(long)]
    pub source: Option<String>,
    #[command(flatten)]
    pub train: TrainFlags,
    #[command(flatten)]
    pub tokenizer: TokenizerFlags,
}

#[derive(Debug, Args)]
pub struct RobustnessArgs {
    #[arg(long)]
    pub model: PathBuf,
    #[command(flatten)]
    pub data: TestSource,
    #[command(flatten)]
    pub perturb: PerturbFlags,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// separable, nsl-kdd, kdd99, unsw-nb15 or x-iiotid; repeatable.
    #[arg(long = "style", default_value = "separable")]
    pub styles: Vec<String>,
    #[arg(long, default_value_t = 2000)]
    pub rows: usize,
}

fn main() -> anyhow::Result<()> {
    let cli = Cli::parse();
    commands::run(cli)
}
