//! `bsce`: synthesize, train, evaluate and sweep from a JSON run config.

mod commands;
mod config;
mod error;

use std::path::PathBuf;
use std::process::ExitCode;

use bsce_core::tta::TtaConfig;
use clap::{Parser, Subcommand, ValueEnum};

use config::RunConfig;
use error::CliError;

#[derive(Parser)]
#[command(
    name = "bsce",
    version,
    about = "Robust-loss training and evaluation on synthetic long-tail data"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run config; every section is optional. Defaults throughout when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Output directory (overrides io.out_dir).
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[arg(long, global = true, value_enum)]
    preset: Option<Preset>,
}

#[derive(Subcommand, Clone, Copy)]
enum Command {
    /// Generate the dataset file and print class counts and weights.
    Synth,
    /// Train one model; writes a checkpoint and history.csv.
    Train,
    /// Plain center-crop evaluation of the checkpoint.
    Eval,
    /// Per-side and combined multi-scale evaluation.
    Tta,
    /// Top-1 vote over io.ensemble checkpoints.
    Ensemble,
    /// Loss-kind × seed comparison on freshly drawn datasets.
    Sweep,
}

#[derive(ValueEnum, Clone, Copy)]
enum Preset {
    /// Resize sides 384/412/424/436/464 with crop 331.
    PaperScales,
}

const LOG_ENV: &str = "BSCE_LOG_LEVEL";

fn init_logging() -> Result<(), CliError> {
    let level = std::env::var(LOG_ENV).unwrap_or_else(|_| "info".into());
    if !["error", "info", "debug"].contains(&level.as_str()) {
        return Err(CliError::Config(format!(
            "{LOG_ENV} must be one of error, info, debug (got {level:?})"
        )));
    }
    env_logger::Builder::new()
        .parse_filters(&level)
        .format_timestamp(None)
        .init();
    Ok(())
}

fn run(cli: &Cli) -> Result<(), CliError> {
    init_logging()?;
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(out) = &cli.out {
        cfg.io.out_dir = out.clone();
    }
    if let Some(Preset::PaperScales) = cli.preset {
        cfg.tta = TtaConfig {
            mode: cfg.tta.mode,
            ..TtaConfig::large_scales()
        };
    }
    cfg.validate()?;
    match cli.command {
        Command::Synth => commands::synth(&cfg),
        Command::Train => commands::train_cmd(&cfg),
        Command::Eval => commands::eval(&cfg),
        Command::Tta => commands::tta(&cfg),
        Command::Ensemble => commands::ensemble(&cfg),
        Command::Sweep => commands::sweep(&cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            // Usage errors are config errors; exit 2 is reserved for I/O.
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
