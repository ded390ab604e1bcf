//! `mdrl` — pretrain, RL-finetune, evaluate, and analyze masked-diffusion
//! models on synthetic verifiable tasks.
//!
//! Every failure exits nonzero with one machine-readable JSON line on stderr:
//! `{"error":"<kind>","message":"..."}`.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use mdrl_core::Error;

#[derive(Parser)]
#[command(name = "mdrl", version, about = "Masked-diffusion RL experiment runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Masked-LM pretraining on synthetic tasks; writes the starting checkpoint.
    Pretrain(RunArgs),
    /// Policy-gradient fine-tuning from a pretrained checkpoint.
    TrainRl(RunArgs),
    /// Reward grid over task families, unmasking strategies, and step budgets.
    Eval(EvalArgs),
    /// Diagnostic CSVs (correlation, histogram, step profile) from a trajectory log.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Run file (TOML).
    #[arg(long)]
    config: PathBuf,
    /// Override the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the config output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Start from this checkpoint instead of the default.
    #[arg(long)]
    resume: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Run file (TOML) providing tasks, decode settings, and seed.
    #[arg(long)]
    config: PathBuf,
    /// Checkpoint to evaluate.
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Trajectory log (JSONL) to analyze.
    #[arg(long)]
    log: PathBuf,
    /// Checkpoint used to replay distributions for entropy.
    #[arg(long)]
    checkpoint: PathBuf,
    /// Metrics log; adds a gradient/utility table grouped by run settings.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Output directory (default: the log's directory).
    #[arg(long)]
    out: Option<PathBuf>,
}

fn error_kind(e: &Error) -> &'static str {
    match e {
        Error::InvalidArgument(_) => "invalid_argument",
        Error::InvalidState(_) => "invalid_state",
        Error::Numeric(_) => "numeric",
        Error::Config(_) => "config",
        Error::Checkpoint(_) => "checkpoint",
        Error::UndefinedCorrelation(_) => "undefined_correlation",
        Error::Io(_) => "io",
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Pretrain(args) => commands::pretrain(&args),
        Command::TrainRl(args) => commands::train_rl(&args),
        Command::Eval(args) => commands::eval(&args),
        Command::Analyze(args) => commands::analyze(&args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let line =
                serde_json::json!({ "error": error_kind(&e), "message": e.to_string() });
            eprintln!("{line}");
            ExitCode::FAILURE
        }
    }
}
