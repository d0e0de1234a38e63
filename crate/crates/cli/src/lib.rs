//! `steerbo` command-line driver: BO experiments, model training and
//! evaluation, dataset preparation and gradient checks.

pub mod bo_run;
pub mod config;
pub mod data;
pub mod error;
pub mod gradcheck;
pub mod model;

use std::path::PathBuf;

use clap::{Parser, Subcommand};

pub use error::CliError;

#[derive(Debug, Parser)]
#[command(name = "steerbo", version, about = "Bayesian hyperparameter search for steering-angle regressors")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run a multi-seed BO experiment and write logs, curves and a summary.
    BoRun(bo_run::BoRunArgs),
    /// Train one architecture on a cached dataset.
    Train(model::TrainArgs),
    /// Compare trained models on one split of a cached dataset.
    Evaluate(model::EvaluateArgs),
    /// Turn a directory of frames plus a labels file into a cached dataset.
    Preprocess(data::PreprocessArgs),
    /// Generate the synthetic moving-bar dataset.
    SynthData(data::SynthArgs),
    /// Check every backward pass against finite differences.
    Gradcheck(gradcheck::GradcheckArgs),
}

/// Common `--config` flag.
#[derive(Debug, Clone, clap::Args)]
pub struct ConfigArg {
    /// JSON run configuration; flags override its fields.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::BoRun(a) => bo_run::run(a),
        Command::Train(a) => model::train(a),
        Command::Evaluate(a) => model::evaluate(a),
        Command::Preprocess(a) => data::preprocess(a),
        Command::SynthData(a) => data::synth(a),
        Command::Gradcheck(a) => gradcheck::run(a),
    }
}

/// Writes `value` as pretty JSON followed by a newline.
pub(crate) fn write_json<T: serde::Serialize>(path: &std::path::Path, value: &T) -> Result<(), CliError> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| CliError::Data(e.to_string()))?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}
