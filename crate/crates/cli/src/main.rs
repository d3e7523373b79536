use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;

use config::CommonArgs;

/// A configuration or input problem detected before any work starts.
/// Exits with status 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Debug, Parser)]
#[command(name = "sqlagents", version, about = "Multi-agent text-to-SQL runner")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run the pipeline over a dataset and write results.jsonl and summary.json.
    Run(CommonArgs),
    /// Build preference pairs from execution feedback for one iteration.
    BuildRlef {
        #[command(flatten)]
        common: CommonArgs,
        /// Iteration number recorded in pairs and the manifest.
        #[arg(long)]
        iteration: Option<u32>,
        /// Actions sampled per observation.
        #[arg(long)]
        actions: Option<usize>,
    },
    /// Score a results file with EX, and optionally TS and VES.
    Eval(commands::eval::EvalArgs),
    /// Compute ORPO losses for a file of scored pairs.
    OrpoScore {
        /// JSONL of {chosen_logprobs, rejected_logprobs, boundary, lambda}.
        pairs: PathBuf,
        /// Weight of the odds-ratio term; overrides per-line values.
        #[arg(long)]
        lambda: Option<f64>,
        /// Use exp(sum) instead of the length-normalized likelihood.
        #[arg(long)]
        unnormalized: bool,
        /// Also write per-pair losses as JSONL here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(common) => commands::run::run(&common),
        Command::BuildRlef {
            common,
            iteration,
            actions,
        } => commands::build_rlef::run(&common, iteration, actions),
        Command::Eval(args) => commands::eval::run(&args),
        Command::OrpoScore {
            pairs,
            lambda,
            unnormalized,
            out,
        } => commands::orpo_score::run(&pairs, lambda, !unnormalized, out.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) if e.downcast_ref::<UsageError>().is_some() => {
            eprintln!("usage error: {e}");
            ExitCode::from(2)
        }
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
