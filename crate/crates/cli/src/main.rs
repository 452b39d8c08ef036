//! `lds`: score, select and inspect long-context training documents.

mod commands;
mod settings;

use std::io::Write;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use commands::{BenchArgs, HeatmapArgs, ScoreArgs, SelectArgs, TrainArgs};
use settings::ConfigArgs;

/// Process exit codes.
pub mod exit {
    pub const OK: u8 = 0;
    pub const FAILURE: u8 = 1;
    pub const VALIDATION: u8 = 2;
    pub const BACKEND_UNREACHABLE: u8 = 3;
    pub const PARTIAL: u8 = 4;
}

/// An error carrying the exit code it should produce.
#[derive(Debug)]
pub struct CliError {
    pub code: u8,
    pub error: anyhow::Error,
}

impl CliError {
    pub fn validation(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: exit::VALIDATION,
            error: error.into(),
        }
    }

    pub fn unreachable(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: exit::BACKEND_UNREACHABLE,
            error: error.into(),
        }
    }
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        Self {
            code: exit::FAILURE,
            error: e.into(),
        }
    }
}

pub type CliResult<T = ()> = Result<T, CliError>;

#[derive(Debug, Parser)]
#[command(name = "lds", version, about = "Long-dependency scoring for long-context training data")]
struct Cli {
    #[command(flatten)]
    config: ConfigArgs,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Train the built-in n-gram scorer on a corpus.
    TrainNgram(TrainArgs),
    /// Score every document of a corpus.
    Score(ScoreArgs),
    /// Rank scored documents and write a selection manifest.
    Select(SelectArgs),
    /// Render a dependency-strength heatmap for one scored document.
    Heatmap(HeatmapArgs),
    /// Measure retrieval accuracy and throughput on a synthetic test set.
    Bench(BenchArgs),
}

fn run(cli: Cli) -> CliResult<u8> {
    let config = settings::load(&cli.config)?;
    if cli.config.show_config {
        // A closed pipe (`| head`) is not an error worth reporting.
        let _ = writeln!(std::io::stdout(), "{}", config.to_json_pretty());
        return Ok(exit::OK);
    }
    let Some(command) = cli.command else {
        return Err(CliError::validation(anyhow::anyhow!(
            "no subcommand given (train-ngram, score, select, heatmap, bench); see --help"
        )));
    };
    match command {
        Command::TrainNgram(args) => commands::train(&config, args),
        Command::Score(args) => commands::score(config, args),
        Command::Select(args) => commands::select(&config, args),
        Command::Heatmap(args) => commands::heatmap(args),
        Command::Bench(args) => commands::bench(config, args),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {:#}", e.error);
            ExitCode::from(e.code)
        }
    }
}
