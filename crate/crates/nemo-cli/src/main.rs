//! Command-line driver: train a toy denoiser, calibrate the detection threshold,
//! localize memorization neurons, mitigate, evaluate and run the exhaustive oracle.

mod commands;
mod rundir;
mod settings;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use nemo::NemoError;

/// Bad flags, unreadable config syntax or unknown prompt ids.
#[derive(Debug)]
pub struct UsageError(pub String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

#[derive(Parser, Debug)]
#[command(name = "nemo", version, about = "Localize memorization neurons in a toy text-conditioned diffusion model")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug, Clone)]
pub struct Common {
    /// Run configuration (TOML); defaults apply to every omitted key.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Model weight file.
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    /// Comma-separated prompt ids such as mem0,mem2,fresh5 (default: every duplicated prompt).
    #[arg(long, global = true, value_delimiter = ',')]
    pub prompts: Vec<String>,
    /// Activation scale applied to localized neurons during mitigation.
    #[arg(long, global = true, allow_hyphen_values = true)]
    pub scale: Option<f64>,
    /// Worker thread cap.
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// TOML file replacing the seed registry.
    #[arg(long, global = true)]
    pub seed_registry: Option<PathBuf>,
    /// Base output directory; each invocation writes a fresh run directory inside it.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Threshold record written by `calibrate`.
    #[arg(long, global = true)]
    pub threshold: Option<PathBuf>,
    /// Directory holding `selection_<id>.json` files written by `localize`.
    #[arg(long, global = true)]
    pub selections: Option<PathBuf>,
    /// Trained tiny-profile model for the oracle cross-check in `evaluate`.
    #[arg(long, global = true)]
    pub tiny_model: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Train a model and record the duplicated prompt ids.
    Train,
    /// Score holdout prompts and write the threshold record with activation statistics.
    Calibrate,
    /// Run two-stage neuron localization for each prompt.
    Localize,
    /// Generate with the localized neurons scaled and report the metric changes.
    Mitigate,
    /// Run the full desk-scale evaluation table.
    Evaluate,
    /// Exhaustively certify minimal sufficient neuron sets (tiny profile).
    Oracle,
    /// Summarize the run directories under --out.
    Report,
}

fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.downcast_ref::<UsageError>().is_some() {
            return 1;
        }
        if let Some(NemoError::NonConvergence { .. }) = cause.downcast_ref::<NemoError>() {
            return 3;
        }
    }
    2
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    if let Some(j) = cli.common.jobs {
        nemo::par::set_jobs(j);
    }
    let result = match cli.command {
        Command::Train => commands::train(&cli.common),
        Command::Calibrate => commands::calibrate(&cli.common),
        Command::Localize => commands::localize(&cli.common),
        Command::Mitigate => commands::mitigate(&cli.common),
        Command::Evaluate => commands::evaluate(&cli.common),
        Command::Oracle => commands::oracle(&cli.common),
        Command::Report => commands::report(&cli.common),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
