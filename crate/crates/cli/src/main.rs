//! `gspo-lab`: batch commands over the `gspo_lab` library.
//!
//! Exit codes: 0 success, 1 threshold failure, 2 config or usage error,
//! 3 training divergence. Each command that writes files puts them under
//! `--out` and writes `manifest.json` last.

use std::process::ExitCode;

use clap::{Parser, Subcommand};

mod commands;
mod config;
mod error;
mod manifest;

use commands::{clip_bounds, equivalence, report, train, variance};

#[derive(Debug, Parser)]
#[command(
    name = "gspo-lab",
    version,
    about = "Sequence-level policy optimization lab"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Check s = PPL_old/PPL_new = exp(ΔH) on random or recorded sequences.
    Equivalence(equivalence::EquivalenceArgs),
    /// Monte Carlo variance of log s against closed forms.
    Variance(variance::VarianceArgs),
    /// Train the toy policy with GSPO or GRPO.
    Train(train::TrainArgs),
    /// Print the entropy and perplexity-ratio bands for a clip range.
    ClipBounds(clip_bounds::ClipBoundsArgs),
    /// Collect plot-ready series from a directory of runs.
    Report(report::ReportArgs),
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Equivalence(a) => equivalence::run(a),
        Command::Variance(a) => variance::run(a),
        Command::Train(a) => train::run(a),
        Command::ClipBounds(a) => clip_bounds::run(a),
        Command::Report(a) => report::run(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
