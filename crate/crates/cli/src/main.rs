//! `bella`: dataset generation, both training stages, evaluation, single
//! questions, gradient checks and the ablations.

mod commands;
mod setup;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::setup::{config_keys_help, CliError};

#[derive(Debug, Parser)]
#[command(
    name = "bella",
    version,
    about = "Single-token BEV question answering on synthetic driving scenes"
)]
#[command(after_help = config_keys_help())]
pub struct Cli {
    /// JSON run configuration; missing keys take their defaults.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<std::path::PathBuf>,

    /// Override one config key, e.g. `--set train.epochs_finetune=3`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,

    /// Print per-epoch progress.
    #[arg(long, short, global = true)]
    pub verbose: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate scenes, descriptions, QA items and the vocabulary.
    Gen(GenArgs),
    /// Stage 1: align the projector with the frozen LM on descriptions.
    Pretrain(TrainArgs),
    /// Stage 2: projector plus LoRA adapters on QA.
    Finetune(FinetuneArgs),
    /// Score a checkpoint, a predictions file or the oracle answerer.
    Eval(EvalArgs),
    /// Answer one question about one scene file.
    Ask(AskArgs),
    /// Central-difference checks of every operator and the composed graph.
    Gradcheck(GradcheckArgs),
    /// Pretraining or projector ablation over `eval.ablation_seeds`.
    Ablate(AblateArgs),
}

#[derive(Debug, Args)]
pub struct GenArgs {
    /// Dataset seed (`data.seed`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Generate exactly this many episodes, all in the training range.
    #[arg(long)]
    pub episodes: Option<u64>,
    /// Output directory (default `paths.data_dir`).
    #[arg(long)]
    pub out: Option<std::path::PathBuf>,
    /// Replace the contents of a non-empty output directory.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Training seed (`train.seed`).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory; must not exist or be empty (default: stamped under `paths.runs_dir`).
    #[arg(long)]
    pub out: Option<std::path::PathBuf>,
}

#[derive(Debug, Args)]
pub struct FinetuneArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Stage-1 checkpoint. Not needed with `train.ablate_pretraining=true`.
    #[arg(long, value_name = "CKPT")]
    pub from: Option<std::path::PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum SplitArg {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Finetuned checkpoint to evaluate.
    #[arg(long, value_name = "CKPT", conflicts_with_all = ["predictions", "oracle"])]
    pub checkpoint: Option<std::path::PathBuf>,
    /// Score an existing predictions file instead of running a model.
    #[arg(long, value_name = "FILE", conflicts_with = "oracle")]
    pub predictions: Option<std::path::PathBuf>,
    /// Answer with the ground-truth oracle (checks the scoring pipeline).
    #[arg(long)]
    pub oracle: bool,
    #[arg(long, value_enum, default_value = "test")]
    pub split: SplitArg,
    /// Output directory (default: stamped under `paths.runs_dir`).
    #[arg(long)]
    pub out: Option<std::path::PathBuf>,
}

#[derive(Debug, Args)]
pub struct AskArgs {
    #[arg(long, value_name = "CKPT")]
    pub checkpoint: std::path::PathBuf,
    /// JSON file holding one scene.
    #[arg(long, value_name = "FILE")]
    pub scene: std::path::PathBuf,
    #[arg(long)]
    pub question: String,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    /// Seeds per operator and per projector variant.
    #[arg(long, default_value_t = 10)]
    pub seeds: u64,
    /// Elements perturbed per tensor in the composed graph.
    #[arg(long, default_value_t = 4)]
    pub per_param: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum KindArg {
    Pretraining,
    Projector,
    All,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long, value_enum)]
    pub kind: KindArg,
    #[arg(long)]
    pub out: Option<std::path::PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("{}", e.line());
            ExitCode::from(e.code())
        }
    }
}

impl CliError {
    fn code(&self) -> u8 {
        match self {
            CliError::Schema(_) => 2,
            CliError::MissingCheckpoint(_) => 3,
            CliError::Runtime(_) => 1,
        }
    }

    /// `error[<kind>]: <message>` on one line.
    fn line(&self) -> String {
        let (kind, msg) = match self {
            CliError::Schema(m) => ("schema", m),
            CliError::MissingCheckpoint(m) => ("missing-checkpoint", m),
            CliError::Runtime(m) => ("runtime", m),
        };
        format!("error[{kind}]: {}", msg.replace('\n', " "))
    }
}
