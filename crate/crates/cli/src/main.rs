//! `optode` command-line front end.
//!
//! Exit codes: 0 success, 1 usage, 2 data, 3 numerical. Failures print one
//! line `error[<kind>]: <message>` to stderr.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use optode::ErrorKind;

#[derive(Debug, Parser)]
#[command(name = "optode", version, about = "Camera optode calibration toolkit")]
pub struct Cli {
    #[command(flatten)]
    pub global: Global,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct Global {
    /// Seed overriding the one in the configuration.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// TOML configuration (JSON with a `.json` extension).
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory; must not exist or be empty.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
    /// Pick checkpoints and ensemble members by test MAE as well. Results
    /// computed this way are written to files marked `oracle`.
    #[arg(long, global = true)]
    pub oracle_selection: bool,
    /// Worker threads; defaults to the number of cores.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset.
    Simulate {
        /// Start from the down-sized smoke configuration.
        #[arg(long)]
        reduced: bool,
    },
    /// Fit per-pixel Stern–Volmer models and write parameter maps.
    Fit {
        #[arg(long)]
        data: PathBuf,
        /// Days to fit on; defaults to all.
        #[arg(long, value_delimiter = ',')]
        days: Vec<usize>,
    },
    /// Fit and score a classical calibration baseline.
    Baseline {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum)]
        method: BaselineMethod,
        /// Ridge penalty for the feature regressor.
        #[arg(long, default_value_t = 1e-2)]
        ridge_lambda: f64,
        #[command(flatten)]
        split: SplitArgs,
    },
    /// Train a neural calibrator.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, value_enum, default_value_t = NetKind::Pinn)]
        kind: NetKind,
        /// Epoch count overriding the configuration.
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        split: SplitArgs,
    },
    /// Train a deep ensemble and score its uncertainty.
    Ensemble {
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = optode::ensemble::DEFAULT_SIZE)]
        size: usize,
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        split: SplitArgs,
    },
    /// Score saved models on days of a dataset; several models are
    /// combined as an ensemble.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long = "model", required = true)]
        models: Vec<PathBuf>,
        /// Days to score; defaults to all.
        #[arg(long, value_delimiter = ',')]
        days: Vec<usize>,
        /// Write residual, attention and confidence maps of each day's last
        /// frame from the first model.
        #[arg(long)]
        diagnostics: bool,
    },
    /// Recompute the evaluation report of a run from its predictions.
    Report {
        /// Directory holding `predictions.csv`.
        #[arg(long)]
        run: PathBuf,
        /// Dataset whose plateaus define the DO bins; simulator defaults
        /// otherwise.
        #[arg(long)]
        data: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BaselineMethod {
    GlobalAverage,
    BestPixels,
    Ridge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum NetKind {
    Pinn,
    Plain,
    Pgnn,
}

/// Day roles. Without explicit lists the last day is the test day, the one
/// before it validates and the rest train.
#[derive(Debug, Clone, Args)]
pub struct SplitArgs {
    #[arg(long, value_delimiter = ',')]
    pub train_days: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub val_days: Vec<usize>,
    #[arg(long, value_delimiter = ',')]
    pub test_days: Vec<usize>,
}

fn kind_label(k: ErrorKind) -> (&'static str, u8) {
    match k {
        ErrorKind::Usage => ("usage", 1),
        ErrorKind::Data => ("data", 2),
        ErrorKind::Numerical => ("numerical", 3),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind as K;
            if matches!(e.kind(), K::DisplayHelp | K::DisplayVersion | K::DisplayHelpOnMissingArgumentOrSubcommand) {
                let _ = e.print();
                return ExitCode::SUCCESS;
            }
            let msg = e.to_string();
            let first = msg.lines().next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("error[usage]: {first}");
            return ExitCode::from(1);
        }
    };
    match commands::run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let (label, code) = kind_label(e.kind());
            eprintln!("error[{label}]: {}", e.to_string().replace('\n', " "));
            ExitCode::from(code)
        }
    }
}
