//! Command-line front end for the ridership pipeline.

pub mod commands;
pub mod output;
pub mod settings;

use std::path::PathBuf;
use clap::{Parser, Subcommand};
use ridership_core::models::MethodId;

use output::Format;

/// Bus ridership forecasting with multi-branch LSTMs.
#[derive(Debug, Parser)]
#[command(name = "ridership", version)]
pub struct Cli {
    /// `key = value` configuration file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Master seed
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (also where the cached dataset lives)
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    #[arg(long, global = true, value_enum, default_value_t = Format::Text)]
    pub format: Format,
    /// Do not log the effective configuration to stderr
    #[arg(long, short, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Parse ridership and weather CSVs, print a summary, write the dataset cache
    Ingest {
        #[arg(long)]
        ridership: Option<PathBuf>,
        #[arg(long)]
        weather: Option<PathBuf>,
    },
    /// Generate a synthetic route (ridership.csv, weather.csv, route.conf)
    Synth {
        #[arg(long)]
        days: Option<usize>,
        #[arg(long)]
        stops: Option<usize>,
    },
    /// Train a method and write checkpoints and loss histories
    Train {
        #[arg(long, value_parser = parse_method)]
        method: Option<MethodId>,
        /// Number of consecutive seeds starting at --seed
        #[arg(long)]
        seeds: Option<usize>,
        /// Hyperparameter file(s): one shared, or one per stop for per-stop methods
        #[arg(long = "hp")]
        hp_files: Vec<PathBuf>,
        #[arg(long)]
        max_epochs: Option<usize>,
    },
    /// Hyperband search; writes the trial report and the winning configuration
    Tune {
        #[arg(long, value_parser = parse_method)]
        method: Option<MethodId>,
        /// Tune only this stop (per-stop methods)
        #[arg(long)]
        stop: Option<usize>,
        /// Maximum epochs per trial (R)
        #[arg(long)]
        max_epochs: Option<usize>,
        #[arg(long)]
        eta: Option<usize>,
    },
    /// Score trained methods and the statistical baseline on the test split
    Evaluate {
        /// Comma-separated method ids
        #[arg(long, value_delimiter = ',', value_parser = parse_method)]
        methods: Vec<MethodId>,
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Predict the next service at every stop
    Predict {
        #[arg(long, value_parser = parse_method)]
        method: Option<MethodId>,
        /// Service to predict, as DATE:SERVICE (default: after the last service)
        #[arg(long)]
        at: Option<String>,
    },
    /// Stop-by-stop Pearson correlation matrix
    Correlate {
        /// `all` (default) or `train`
        #[arg(long)]
        split: Option<String>,
    },
}

fn parse_method(s: &str) -> Result<MethodId, String> {
    s.parse()
}

pub use commands::CliError;

/// Parses `args` (including the program name) and runs the command,
/// writing its report to `out`.
/// Usage errors are returned as clap errors so callers can print or exit.
pub fn run_from<I, T>(args: I, out: &mut dyn std::io::Write) -> Result<(), RunError>
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = Cli::try_parse_from(args).map_err(RunError::Usage)?;
    commands::run(cli, out).map_err(RunError::Failed)
}

#[derive(Debug)]
pub enum RunError {
    Usage(clap::Error),
    Failed(CliError),
}

impl std::fmt::Display for RunError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RunError::Usage(e) => write!(f, "{e}"),
            RunError::Failed(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for RunError {}
