//! `domaug`: generate data, train, evaluate, compare mechanisms and export
//! embeddings.
//!
//! Exit codes: 0 on success, 1 for configuration errors, 2 for runtime
//! failures (I/O, divergence).

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

/// Environment variable naming the default output root.
pub const OUTPUT_ROOT_ENV: &str = "DOMAUG_OUTPUT_ROOT";

#[derive(Debug, Parser)]
#[command(
    name = "domaug",
    version,
    about = "Domain-augmented deep metric learning experiments"
)]
pub struct Cli {
    /// Root under which outputs go when no explicit --out is given.
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV, default_value = "runs")]
    pub output_root: PathBuf,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(long, short)]
    pub config: PathBuf,
    /// Override a config key, e.g. `--set mechanism.seed=3` (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write the configured synthetic dataset as an image folder.
    GenData {
        #[command(flatten)]
        config: ConfigArgs,
        /// Destination (default: <output-root>/data/<config name>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace a non-empty destination.
        #[arg(long)]
        force: bool,
    },
    /// Train one mechanism; writes checkpoint.{json,bin} and history.jsonl.
    Train {
        #[command(flatten)]
        config: ConfigArgs,
        /// Run directory (default: config output_dir, else
        /// <output-root>/<config name>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Continue from the checkpoint in the run directory.
        #[arg(long, conflicts_with = "force")]
        resume: bool,
        /// Replace an existing run directory.
        #[arg(long)]
        force: bool,
    },
    /// Recall@K per test rotation plus the ensemble, for a trained run.
    Eval {
        /// Run directory written by `train`.
        #[arg(long)]
        run: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Test rotations in quarter turns, e.g. `0,1,2,3`.
        #[arg(long, value_delimiter = ',')]
        domains: Option<Vec<u8>>,
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
        /// Report directory (default: <run>/eval).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train several mechanisms over several seeds and tabulate Recall@K.
    Compare {
        #[command(flatten)]
        config: ConfigArgs,
        /// Any of plain, data-aug, multi-model, ideal-split, ideal-shared.
        #[arg(
            long,
            value_delimiter = ',',
            default_value = "plain,data-aug,ideal-split"
        )]
        mechanisms: Vec<String>,
        #[arg(long, value_delimiter = ',', default_value = "0")]
        seeds: Vec<u64>,
        /// Output directory (default: <output-root>/compare/<config name>).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Replace an existing output directory.
        #[arg(long)]
        force: bool,
    },
    /// Export test-set embeddings of a trained run as a tensor archive.
    Embed {
        #[arg(long)]
        run: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Export one rotation (quarter turns) instead of the ensemble.
        #[arg(long)]
        domain: Option<u8>,
        /// Export the training split instead of the test split.
        #[arg(long)]
        train_split: bool,
        /// Destination directory (default: <run>/embeddings).
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

/// Which data to evaluate on; defaults to the run's own config.
#[derive(Debug, Args)]
pub struct DataArgs {
    /// Experiment config describing the data (default: <run>/config.toml).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

/// An error plus the exit code it maps to.
#[derive(Debug)]
pub struct Failure {
    pub code: u8,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn config(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: 1,
            error: error.into(),
        }
    }

    pub fn runtime(error: impl Into<anyhow::Error>) -> Self {
        Self {
            code: 2,
            error: error.into(),
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}
