//! Black-box objectives: analytic landscapes, an external-process
//! protocol, and the validation MSE of a freshly trained ST-LSTM.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::PathBuf;
use std::process::{Command, Stdio};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use steerbo_nn::data::{load_split, split_dataset, synth_dataset, DatasetSplit, SynthSpec};
use steerbo_nn::model::{build_stlstm, train, Network, StLstmConfig, TrainSettings};
use steerbo_nn::NnError;
use thiserror::Error;
use wait_timeout::ChildExt;

use crate::search_space::{
    build_stlstm_space, Configuration, SearchSpace, SpaceError, CONV3D_MAPS, CONVLSTM_MAPS, DROPOUT, FC_NEURONS,
    LEARNING_RATE,
};

#[derive(Debug, Error)]
pub enum ObjectiveError {
    #[error("invalid configuration: {0}")]
    InvalidConfig(#[from] SpaceError),
    #[error("objective process failed ({status}): {stderr}")]
    ProcessFailure { status: String, stderr: String },
    #[error("objective protocol error: {0}")]
    Protocol(String),
    #[error("objective process timed out after {0:?}")]
    Timeout(Duration),
    #[error("i/o error running objective: {0}")]
    Io(#[from] std::io::Error),
    #[error("training failed: {0}")]
    Training(#[from] NnError),
    #[error("objective returned a non-finite value")]
    NonFinite,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvaluationResult {
    pub value: f64,
    pub diagnostics: BTreeMap<String, Value>,
}

impl EvaluationResult {
    pub fn plain(value: f64) -> Self {
        Self { value, diagnostics: BTreeMap::new() }
    }
}

/// A function from configurations to reals. `seed` lets stochastic
/// objectives be reproducible; deterministic ones ignore it.
pub trait Objective: Send + Sync {
    fn evaluate(&self, cfg: &Configuration, seed: u64) -> Result<EvaluationResult, ObjectiveError>;
}

/// Constant minus two anisotropic Gaussian wells plus a mild quadratic bowl,
/// evaluated on the unit-cube encoding.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Landscape {
    pub base: f64,
    pub wells: Vec<Well>,
    pub bowl_center: Vec<f64>,
    pub bowl_weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Well {
    pub depth: f64,
    pub center: Vec<f64>,
    pub widths: Vec<f64>,
}

impl Landscape {
    pub fn value(&self, u: &[f64]) -> f64 {
        let d = u.len() as f64;
        let mut v = self.base;
        for w in &self.wells {
            let q: f64 = u.iter().zip(&w.center).zip(&w.widths).map(|((x, c), s)| ((x - c) / s).powi(2)).sum();
            v -= w.depth * (-0.5 * q).exp();
        }
        let bowl: f64 = u.iter().zip(&self.bowl_center).map(|(x, c)| (x - c).powi(2)).sum();
        v + self.bowl_weight * bowl / d
    }

    /// Fixed landscape over the eight ST-LSTM hyperparameters.
    pub fn stlstm_space() -> Self {
        // Learning rate, dropout and dense width dominate; the convolutional
        // widths only shift the value slightly.
        let main = vec![0.68, 0.42, 0.58, 0.35, 0.55, 0.62, 0.30, 0.62];
        Self {
            base: 1.0,
            wells: vec![
                Well { depth: 0.6, center: main.clone(), widths: vec![4.0, 4.5, 4.2, 4.8, 4.4, 0.5, 0.4, 0.35] },
                Well {
                    depth: 0.25,
                    center: vec![0.12, 0.88, 0.12, 0.88, 0.17, 0.12, 0.88, 0.12],
                    widths: vec![2.0, 2.0, 2.0, 2.0, 2.0, 0.3, 0.2, 0.15],
                },
            ],
            bowl_center: main,
            bowl_weight: 0.1,
        }
    }

    /// Landscape of the same family for an arbitrary dimension.
    pub fn generic(d: usize) -> Self {
        const PHI: f64 = 0.618_033_988_749_894_9;
        let frac = |x: f64| x - x.floor();
        let main: Vec<f64> = (0..d).map(|i| 0.3 + 0.4 * frac((i + 1) as f64 * PHI)).collect();
        let other: Vec<f64> = main.iter().map(|c| 1.0 - c).collect();
        Self {
            base: 1.0,
            wells: vec![
                Well { depth: 0.6, center: main.clone(), widths: vec![0.4; d] },
                Well { depth: 0.3, center: other, widths: vec![0.15; d] },
            ],
            bowl_center: main,
            bowl_weight: 0.12,
        }
    }
}

/// Deterministic analytic objective over any search space.
#[derive(Clone, Debug)]
pub struct SyntheticObjective {
    space: SearchSpace,
    landscape: Landscape,
}

impl SyntheticObjective {
    pub fn stlstm_space() -> Self {
        Self { space: build_stlstm_space(), landscape: Landscape::stlstm_space() }
    }

    pub fn continuous(space: SearchSpace) -> Self {
        let landscape = Landscape::generic(space.dim());
        Self { space, landscape }
    }

    pub fn space(&self) -> &SearchSpace {
        &self.space
    }

    pub fn value_at_unit(&self, u: &[f64]) -> f64 {
        self.landscape.value(u)
    }

    pub fn value(&self, cfg: &Configuration) -> Result<f64, ObjectiveError> {
        Ok(self.landscape.value(&self.space.encode(cfg)?))
    }
}

impl Objective for SyntheticObjective {
    fn evaluate(&self, cfg: &Configuration, _seed: u64) -> Result<EvaluationResult, ObjectiveError> {
        self.value(cfg).map(EvaluationResult::plain)
    }
}

/// Minimum and maximum over a candidate grid, with the minimizing point.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridExtremes {
    pub min_value: f64,
    pub max_value: f64,
    pub argmin: Vec<f64>,
}

impl GridExtremes {
    /// Enumerated extremes of [`SyntheticObjective::stlstm_space`], stored so
    /// callers need not rescan the 98,304-point grid.
    pub fn stored_stlstm_space() -> Self {
        serde_json::from_str(include_str!("../data/synthetic_stlstm_space_optimum.json"))
            .expect("bundled optimum file is valid JSON")
    }

    /// Position of `value` within `[min_value, max_value]`, 0 at the optimum.
    pub fn normalized_gap(&self, value: f64) -> f64 {
        (value - self.min_value) / (self.max_value - self.min_value)
    }
}

/// Exhaustive scan of the grid part of the candidate set (discrete bin
/// centers crossed with continuous stratum centers).
pub fn grid_extremes(objective: &SyntheticObjective) -> GridExtremes {
    let cands = crate::acquisition::candidate_set(objective.space(), 0);
    let grid = cands.len() - crate::acquisition::RANDOM_CANDIDATES;
    let mut best = (f64::INFINITY, 0usize);
    let mut max_value = f64::NEG_INFINITY;
    for i in 0..grid {
        let v = objective.value_at_unit(cands.point(i));
        if v < best.0 {
            best = (v, i);
        }
        max_value = max_value.max(v);
    }
    GridExtremes { min_value: best.0, max_value, argmin: cands.point(best.1).to_vec() }
}

/// Runs a command per evaluation: the configuration goes to its stdin as
/// one JSON object, and it must print `{"objective": <number>}`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExternalCommand {
    pub command: Vec<String>,
    pub timeout: Duration,
}

impl ExternalCommand {
    pub fn new(command: Vec<String>, timeout: Duration) -> Self {
        Self { command, timeout }
    }
}

pub fn parse_reply(stdout: &str) -> Result<f64, ObjectiveError> {
    let line = stdout
        .lines()
        .map(str::trim)
        .rfind(|l| !l.is_empty())
        .ok_or_else(|| ObjectiveError::Protocol("empty reply".into()))?;
    let v: Value = serde_json::from_str(line).map_err(|e| ObjectiveError::Protocol(format!("malformed reply: {e}")))?;
    let x = v
        .get("objective")
        .ok_or_else(|| ObjectiveError::Protocol("reply lacks an \"objective\" key".into()))?
        .as_f64()
        .ok_or_else(|| ObjectiveError::Protocol("\"objective\" is not a number".into()))?;
    if x.is_finite() {
        Ok(x)
    } else {
        Err(ObjectiveError::NonFinite)
    }
}

impl Objective for ExternalCommand {
    fn evaluate(&self, cfg: &Configuration, seed: u64) -> Result<EvaluationResult, ObjectiveError> {
        let (program, args) =
            self.command.split_first().ok_or_else(|| ObjectiveError::Protocol("empty command line".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .env("STEERBO_EVAL_SEED", seed.to_string())
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()?;
        let payload = serde_json::to_string(cfg).expect("configuration serializes");
        if let Some(mut stdin) = child.stdin.take() {
            // A child that exits without reading its input is not an error here.
            let _ = writeln!(stdin, "{payload}");
        }
        let mut out_pipe = child.stdout.take().expect("piped stdout");
        let mut err_pipe = child.stderr.take().expect("piped stderr");
        let out_reader = std::thread::spawn(move || {
            let mut s = String::new();
            let _ = out_pipe.read_to_string(&mut s);
            s
        });
        let err_reader = std::thread::spawn(move || {
            let mut s = String::new();
            let _ = err_pipe.read_to_string(&mut s);
            s
        });
        let status = match child.wait_timeout(self.timeout)? {
            Some(status) => status,
            None => {
                child.kill()?;
                child.wait()?;
                return Err(ObjectiveError::Timeout(self.timeout));
            }
        };
        let stdout = out_reader.join().unwrap_or_default();
        let stderr = err_reader.join().unwrap_or_default();
        if !status.success() {
            return Err(ObjectiveError::ProcessFailure {
                status: status.to_string(),
                stderr: stderr.trim().to_string(),
            });
        }
        parse_reply(&stdout).map(EvaluationResult::plain)
    }
}

/// Maps a search-space point to an ST-LSTM configuration.
pub fn stlstm_config(cfg: &Configuration) -> Result<StLstmConfig, ObjectiveError> {
    let get = |name: &str| cfg.get(name).ok_or_else(|| SpaceError::MissingParam(name.to_string()));
    let count = |name: &str| -> Result<usize, ObjectiveError> {
        let v = get(name)?;
        if v < 1.0 || v.fract() != 0.0 {
            return Err(SpaceError::OutOfDomain { name: name.to_string(), value: v }.into());
        }
        Ok(v as usize)
    };
    let mut maps = [0; 4];
    for (m, name) in maps.iter_mut().zip(CONVLSTM_MAPS) {
        *m = count(name)?;
    }
    Ok(StLstmConfig {
        convlstm_maps: maps,
        conv3d_maps: count(CONV3D_MAPS)?,
        fc_neurons: count(FC_NEURONS)?,
        dropout_rate: get(DROPOUT)?,
        learning_rate: get(LEARNING_RATE)?,
        ..StLstmConfig::default()
    })
}

/// Trains an ST-LSTM for each configuration and reports its best
/// validation MSE. Divergence yields 10× the initial validation MSE.
#[derive(Clone, Debug)]
pub struct ToyTrainer {
    pub data: Arc<DatasetSplit>,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
}

pub const DIVERGENCE_PENALTY: f64 = 10.0;

impl ToyTrainer {
    pub fn new(data: Arc<DatasetSplit>) -> Self {
        Self { data, epochs: 15, batch_size: 50, patience: 5 }
    }

    fn input_shape(&self) -> Result<[usize; 4], ObjectiveError> {
        let s = self.data.train.first().ok_or_else(|| NnError::Data("empty training set".into()))?.frames.shape();
        <[usize; 4]>::try_from(s).map_err(|_| NnError::Shape(format!("sample shape {s:?} is not [T,H,W,C]")).into())
    }
}

impl Objective for ToyTrainer {
    fn evaluate(&self, cfg: &Configuration, seed: u64) -> Result<EvaluationResult, ObjectiveError> {
        let st = stlstm_config(cfg)?;
        let desc = build_stlstm(&st, self.input_shape()?)?;
        let mut net = Network::from_descriptor(&desc, seed)?;
        let settings = TrainSettings {
            learning_rate: st.learning_rate,
            epochs: self.epochs,
            batch_size: self.batch_size,
            patience: self.patience,
            seed,
            restore_best: true,
        };
        let report = train(&mut net, &self.data, &settings)?;
        let initial = report.val_mse[0];
        let value = if report.diverged || !report.best_val_mse.is_finite() {
            DIVERGENCE_PENALTY * initial
        } else {
            report.best_val_mse
        };
        if !value.is_finite() {
            return Err(ObjectiveError::NonFinite);
        }
        let mut diagnostics = BTreeMap::new();
        diagnostics.insert("epochs_run".into(), Value::from(report.epochs_run));
        diagnostics.insert("early_stopped".into(), Value::from(report.early_stopped));
        diagnostics.insert("diverged".into(), Value::from(report.diverged));
        diagnostics.insert("initial_val_mse".into(), Value::from(initial));
        diagnostics.insert("train_mse".into(), Value::from(*report.train_mse.last().unwrap_or(&f64::NAN)));
        diagnostics.insert("best_epoch".into(), Value::from(report.best_epoch));
        Ok(EvaluationResult { value, diagnostics })
    }
}

/// Serializable objective choice, as read from configuration files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum ObjectiveSpec {
    SyntheticStlstmSpace,
    SyntheticContinuous,
    ExternalCommand {
        command: Vec<String>,
        #[serde(default = "default_timeout_secs")]
        timeout_secs: f64,
    },
    ToyTrainer {
        /// Cached dataset; a synthetic moving-bar set is generated when absent.
        #[serde(default)]
        dataset: Option<PathBuf>,
        #[serde(default = "default_synth_frames")]
        synth_frames: usize,
        #[serde(default)]
        synth_seed: u64,
        #[serde(default = "default_epochs")]
        epochs: usize,
        #[serde(default = "default_batch")]
        batch_size: usize,
        #[serde(default = "default_patience")]
        patience: usize,
    },
}

fn default_timeout_secs() -> f64 {
    600.0
}
fn default_synth_frames() -> usize {
    66
}
fn default_epochs() -> usize {
    15
}
fn default_batch() -> usize {
    50
}
fn default_patience() -> usize {
    5
}

impl ObjectiveSpec {
    /// Builds the objective; `space` is used by the continuous landscape.
    pub fn build(&self, space: &SearchSpace) -> Result<Box<dyn Objective>, ObjectiveError> {
        Ok(match self {
            Self::SyntheticStlstmSpace => Box::new(SyntheticObjective::stlstm_space()),
            Self::SyntheticContinuous => Box::new(SyntheticObjective::continuous(space.clone())),
            Self::ExternalCommand { command, timeout_secs } => {
                if command.is_empty() {
                    return Err(ObjectiveError::Protocol("external objective needs a command".into()));
                }
                if !(timeout_secs.is_finite() && *timeout_secs > 0.0) {
                    return Err(ObjectiveError::Protocol("timeout must be positive".into()));
                }
                Box::new(ExternalCommand::new(command.clone(), Duration::from_secs_f64(*timeout_secs)))
            }
            Self::ToyTrainer { dataset, synth_frames, synth_seed, epochs, batch_size, patience } => {
                let split = match dataset {
                    Some(path) => load_split(path)?,
                    None => split_dataset(
                        synth_dataset(*synth_frames, &SynthSpec::default(), *synth_seed)?,
                        (0.64, 0.16, 0.20),
                    )?,
                };
                Box::new(ToyTrainer {
                    data: Arc::new(split),
                    epochs: *epochs,
                    batch_size: *batch_size,
                    patience: *patience,
                })
            }
        })
    }
}
