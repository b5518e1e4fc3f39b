mod commands;
mod manifest;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use spmem::model::ModelKind;
use spmem::text::Language;

/// Shared-private memory seq2seq models for multilingual dialogue.
#[derive(Debug, Parser)]
#[command(name = "spmem", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// Flat `key = value` config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Seed for every random choice of the run.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory (created if missing).
    #[arg(long)]
    pub out: PathBuf,
    /// Extra `key=value` overrides, applied after the config file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Write a synthetic bilingual corpus (train/valid/test TSVs per language).
    Synth(SynthArgs),
    /// Train a model and write its best checkpoint and metric history.
    Train(TrainArgs),
    /// Generate responses for a test set and score them.
    Eval(EvalArgs),
    /// Generate responses for queries.
    Generate(GenerateArgs),
    /// Export 2-D PCA projections of memory keys.
    InspectMem(InspectArgs),
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    #[command(flatten)]
    pub common: Common,
    /// Training pairs per language.
    #[arg(long)]
    pub pairs: Option<usize>,
    #[arg(long)]
    pub pairs_l1: Option<usize>,
    #[arg(long)]
    pub pairs_l2: Option<usize>,
    #[arg(long)]
    pub valid: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
    /// Surface vocabulary size per language.
    #[arg(long)]
    pub vocab: Option<usize>,
    /// `reverse` or `copy`.
    #[arg(long)]
    pub rule: Option<String>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model: Option<ModelKind>,
    /// Train on one language only.
    #[arg(long)]
    pub monolingual: Option<Language>,
    /// Memory blocks per bank.
    #[arg(long)]
    pub blocks: Option<usize>,
    #[arg(long)]
    pub train_l1: Option<PathBuf>,
    #[arg(long)]
    pub train_l2: Option<PathBuf>,
    #[arg(long)]
    pub valid_l1: Option<PathBuf>,
    #[arg(long)]
    pub valid_l2: Option<PathBuf>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Continue from a checkpoint written as `last.ckpt` by an earlier run.
    #[arg(long)]
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Test corpus TSV (query TAB response).
    #[arg(long)]
    pub test: Option<PathBuf>,
    #[arg(long, default_value = "L1")]
    pub lang: Language,
    /// Score an existing generations TSV instead of decoding.
    #[arg(long)]
    pub generations: Option<PathBuf>,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// One query per line; anything after a tab is kept as the reference.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "L1")]
    pub lang: Language,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
}

#[derive(Debug, Args)]
pub struct InspectArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Bank to export (`private-L1`, `private-L2`, `shared`); repeatable.
    /// Defaults to every bank in the checkpoint.
    #[arg(long = "bank")]
    pub banks: Vec<String>,
    #[arg(long, default_value_t = 0)]
    pub block: usize,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<spmem::Error>() {
        Some(spmem::Error::Divergence { .. }) => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Synth(a) => commands::synth(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Generate(a) => commands::generate_cmd(a),
        Command::InspectMem(a) => commands::inspect_mem(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
