//! JSON run configuration. Every field is optional; command-line flags
//! override whatever the file sets, and built-in defaults fill the rest.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use steerbo_core::objectives::ObjectiveSpec;
use steerbo_core::search_space::SearchSpace;
use steerbo_nn::model::{JNetConfig, PilotNetConfig, StLstmConfig};

use crate::error::CliError;

pub const SEED_ENV: &str = "STEERBO_SEED";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Arch {
    Stlstm,
    Pilotnet,
    Jnet,
}

impl Arch {
    pub fn name(self) -> &'static str {
        match self {
            Arch::Stlstm => "stlstm",
            Arch::Pilotnet => "pilotnet",
            Arch::Jnet => "jnet",
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub objective: Option<ObjectiveSpec>,
    pub space: Option<SearchSpace>,
    /// Entries like `"lcb"` or `"ei:0.05"`.
    pub acquisitions: Option<Vec<String>>,
    pub random_baseline: Option<bool>,
    pub n_init: Option<usize>,
    pub n_iter: Option<usize>,
    pub n_runs: Option<usize>,
    pub base_seed: Option<u64>,
    pub output: Option<PathBuf>,
    pub parallel_runs: Option<usize>,

    pub arch: Option<Arch>,
    pub stlstm: Option<StLstmConfig>,
    pub pilotnet: Option<PilotNetConfig>,
    pub jnet: Option<JNetConfig>,
    pub dataset: Option<PathBuf>,
    pub weights: Option<Vec<String>>,
    pub epochs: Option<usize>,
    pub batch_size: Option<usize>,
    pub patience: Option<usize>,
    pub learning_rate: Option<f64>,

    pub images: Option<PathBuf>,
    pub labels: Option<PathBuf>,
    pub crop_top: Option<usize>,
    pub crop_bottom: Option<usize>,
    pub split: Option<[f64; 3]>,
    /// Half-open range of labels-file records for `preprocess`.
    pub frame_range: Option<[usize; 2]>,

    pub synth_frames: Option<usize>,
    pub synth_height: Option<usize>,
    pub synth_width: Option<usize>,
}

impl RunConfig {
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let Some(path) = path else { return Ok(Self::default()) };
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| CliError::Config(format!("config {}: {e}", path.display())))
    }
}

/// Flag, then file, then default.
pub fn pick<T>(flag: Option<T>, file: Option<T>, default: T) -> T {
    flag.or(file).unwrap_or(default)
}

/// Flag, then file, then `STEERBO_SEED`, then 0.
pub fn resolve_seed(flag: Option<u64>, file: Option<u64>) -> Result<u64, CliError> {
    if let Some(s) = flag.or(file) {
        return Ok(s);
    }
    match std::env::var(SEED_ENV) {
        Ok(v) => v.trim().parse().map_err(|_| CliError::Config(format!("{SEED_ENV}={v} is not an unsigned integer"))),
        Err(_) => Ok(0),
    }
}

pub fn require<T>(value: Option<T>, what: &str) -> Result<T, CliError> {
    value.ok_or_else(|| CliError::Config(format!("missing {what}")))
}

pub fn digest<T: Serialize>(value: &T) -> String {
    let text = serde_json::to_string(value).expect("config serializes");
    hex::encode(Sha256::digest(text.as_bytes()))
}

/// Creates `dir`; failure is a configuration problem, not a data one.
pub fn prepare_output(dir: &Path) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Config(format!("output directory {} is not writable: {e}", dir.display())))
}

pub fn parse_split(text: &str) -> Result<[f64; 3], String> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>().map_err(|e| format!("bad fraction '{p}': {e}")))
        .collect::<Result<_, _>>()?;
    <[f64; 3]>::try_from(parts).map_err(|_| "split needs three comma-separated fractions".to_string())
}
