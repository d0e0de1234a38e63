//! The Bayesian-optimization loop, the multi-seed experiment protocol and
//! its on-disk formats.

use std::io::{BufRead, Write};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::acquisition::{propose_next, AcquisitionError, AcquisitionKind, Incumbent};
use crate::gp::{GpError, GpModel};
use crate::objectives::{Objective, ObjectiveError};
use crate::search_space::{Configuration, SearchSpace, SpaceError};

#[derive(Debug, Error)]
pub enum BoError {
    #[error("invalid budget: {0}")]
    Budget(String),
    #[error(transparent)]
    Space(#[from] SpaceError),
    #[error("surrogate fit failed: {0}")]
    Surrogate(#[from] GpError),
    #[error(transparent)]
    Acquisition(#[from] AcquisitionError),
    #[error("objective failed at trial {index}: {source}")]
    Objective { index: usize, source: ObjectiveError, partial: Box<RunLog> },
    #[error("run log is empty")]
    EmptyLog,
    #[error("experiment summary has no acquisition entries")]
    EmptySummary,
    #[error("run log format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    InitialDesign,
    Bo,
    Random,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub phase: Phase,
    pub config: Configuration,
    pub value: f64,
    pub wall_time: f64,
}

/// How the points after the initial design were chosen.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "kebab-case")]
pub enum Strategy {
    Acquisition(AcquisitionKind),
    RandomSearch,
}

impl Strategy {
    pub fn label(&self) -> String {
        match self {
            Strategy::Acquisition(k) => k.kind.name().to_string(),
            Strategy::RandomSearch => "random".to_string(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunLog {
    pub seed: u64,
    pub strategy: Strategy,
    pub n_init: usize,
    pub n_iter: usize,
    pub space_digest: String,
    pub trials: Vec<Trial>,
    pub incumbent: Option<Incumbent>,
}

impl RunLog {
    fn new(space: &SearchSpace, strategy: Strategy, n_init: usize, n_iter: usize, seed: u64) -> Self {
        Self { seed, strategy, n_init, n_iter, space_digest: space.digest(), trials: Vec::new(), incumbent: None }
    }

    fn push(&mut self, phase: Phase, config: Configuration, value: f64, wall_time: f64) {
        let better = self.incumbent.as_ref().is_none_or(|inc| value < inc.best_value);
        if better {
            self.incumbent = Some(Incumbent { best_value: value, best_config: config.clone() });
        }
        self.trials.push(Trial { index: self.trials.len(), phase, config, value, wall_time });
    }

    pub fn is_complete(&self) -> bool {
        self.trials.len() == self.n_init + self.n_iter
    }
}

/// Seed streams derived from the run seed, so each consumer is independent.
fn sub_seed(seed: u64, stream: u64, i: usize) -> u64 {
    let mut x = seed ^ stream.wrapping_mul(0xD6E8_FEB8_6659_FD93) ^ (i as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    // splitmix64 finalizer
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

const STREAM_LHS: u64 = 1;
const STREAM_FIT: u64 = 2;
const STREAM_CANDIDATES: u64 = 3;
const STREAM_EVAL: u64 = 4;
const STREAM_RANDOM: u64 = 5;

fn evaluate(
    log: &mut RunLog,
    objective: &dyn Objective,
    phase: Phase,
    config: Configuration,
    seed: u64,
) -> Result<(), BoError> {
    let index = log.trials.len();
    let start = Instant::now();
    let result = objective.evaluate(&config, sub_seed(seed, STREAM_EVAL, index));
    let wall = start.elapsed().as_secs_f64();
    match result {
        Ok(r) if r.value.is_finite() => {
            log.push(phase, config, r.value, wall);
            Ok(())
        }
        Ok(_) => Err(BoError::Objective { index, source: ObjectiveError::NonFinite, partial: Box::new(log.clone()) }),
        Err(source) => Err(BoError::Objective { index, source, partial: Box::new(log.clone()) }),
    }
}

fn initial_design(
    space: &SearchSpace,
    objective: &dyn Objective,
    log: &mut RunLog,
    n_init: usize,
    seed: u64,
) -> Result<(), BoError> {
    for cfg in space.lhs_sample(n_init, sub_seed(seed, STREAM_LHS, 0))? {
        evaluate(log, objective, Phase::InitialDesign, cfg, seed)?;
    }
    Ok(())
}

/// Latin-hypercube initial design followed by `n_iter` surrogate-guided
/// evaluations, refitting the GP before every proposal.
pub fn run_bo(
    space: &SearchSpace,
    objective: &dyn Objective,
    kind: AcquisitionKind,
    n_init: usize,
    n_iter: usize,
    seed: u64,
) -> Result<RunLog, BoError> {
    if n_init == 0 {
        return Err(BoError::Budget("n_init must be at least 1".into()));
    }
    let mut log = RunLog::new(space, Strategy::Acquisition(kind), n_init, n_iter, seed);
    initial_design(space, objective, &mut log, n_init, seed)?;
    for it in 0..n_iter {
        let x: Vec<Vec<f64>> = log.trials.iter().map(|t| space.encode(&t.config)).collect::<Result<_, _>>()?;
        let y: Vec<f64> = log.trials.iter().map(|t| t.value).collect();
        let model = GpModel::fit(&x, &y, sub_seed(seed, STREAM_FIT, it))?;
        let incumbent = log.incumbent.clone().expect("initial design evaluated");
        let proposal = propose_next(&model, &kind, &incumbent, space, sub_seed(seed, STREAM_CANDIDATES, it))?;
        evaluate(&mut log, objective, Phase::Bo, proposal.config, seed)?;
    }
    Ok(log)
}

/// Baseline with the same initial design and budget, continuing with
/// uniform random configurations.
pub fn run_random_search(
    space: &SearchSpace,
    objective: &dyn Objective,
    n_init: usize,
    n_iter: usize,
    seed: u64,
) -> Result<RunLog, BoError> {
    if n_init == 0 {
        return Err(BoError::Budget("n_init must be at least 1".into()));
    }
    let mut log = RunLog::new(space, Strategy::RandomSearch, n_init, n_iter, seed);
    initial_design(space, objective, &mut log, n_init, seed)?;
    if n_iter > 0 {
        for cfg in space.random_sample(n_iter, sub_seed(seed, STREAM_RANDOM, 0))? {
            evaluate(&mut log, objective, Phase::Random, cfg, seed)?;
        }
    }
    Ok(log)
}

/// Running minimum starting at the end of the initial design: element `k`
/// is the best value among the first `n_init + k` trials.
pub fn best_seen_curve(log: &RunLog) -> Result<Vec<f64>, BoError> {
    if log.trials.is_empty() {
        return Err(BoError::EmptyLog);
    }
    let first = log.n_init.clamp(1, log.trials.len());
    let mut best = log.trials[..first].iter().map(|t| t.value).fold(f64::INFINITY, f64::min);
    let mut curve = vec![best];
    for t in &log.trials[first..] {
        best = best.min(t.value);
        curve.push(best);
    }
    Ok(curve)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategySummary {
    pub strategy: Strategy,
    /// Pointwise over completed runs.
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
    /// `(seed, final best seen)` for each completed run, in seed order.
    pub finals: Vec<(u64, f64)>,
    /// False when at least one run failed; aggregates then cover the
    /// completed runs only.
    pub complete: bool,
}

impl StrategySummary {
    pub fn final_mean(&self) -> f64 {
        *self.mean.last().unwrap_or(&f64::NAN)
    }

    pub fn final_std(&self) -> f64 {
        *self.std.last().unwrap_or(&f64::NAN)
    }
}

#[derive(Debug)]
pub struct RunFailure {
    pub strategy: Strategy,
    pub seed: u64,
    pub error: BoError,
}

#[derive(Debug, Default)]
pub struct ExperimentSummary {
    pub entries: Vec<StrategySummary>,
    pub logs: Vec<RunLog>,
    pub failures: Vec<RunFailure>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub n_init: usize,
    pub n_iter: usize,
    pub n_runs: usize,
    pub base_seed: u64,
}

impl Default for ExperimentPlan {
    fn default() -> Self {
        Self { n_init: 5, n_iter: 20, n_runs: 10, base_seed: 0 }
    }
}

/// Pointwise mean and sample standard deviation (zero for a single run).
pub fn aggregate(curves: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let Some(len) = curves.iter().map(Vec::len).min() else {
        return (vec![], vec![]);
    };
    let n = curves.len() as f64;
    let mut mean = Vec::with_capacity(len);
    let mut std = Vec::with_capacity(len);
    for k in 0..len {
        let m = curves.iter().map(|c| c[k]).sum::<f64>() / n;
        let var =
            if curves.len() > 1 { curves.iter().map(|c| (c[k] - m).powi(2)).sum::<f64>() / (n - 1.0) } else { 0.0 };
        mean.push(m);
        std.push(var.sqrt());
    }
    (mean, std)
}

/// Runs every strategy with seeds `base_seed..base_seed + n_runs`. Runs
/// execute on the current rayon pool; results are joined in
/// (strategy, seed) order so the summary does not depend on scheduling.
pub fn run_experiment(
    space: &SearchSpace,
    objective: &dyn Objective,
    strategies: &[Strategy],
    plan: &ExperimentPlan,
) -> Result<ExperimentSummary, BoError> {
    if plan.n_runs == 0 {
        return Err(BoError::Budget("n_runs must be at least 1".into()));
    }
    if plan.n_init == 0 {
        return Err(BoError::Budget("n_init must be at least 1".into()));
    }
    let jobs: Vec<(Strategy, u64)> = strategies
        .iter()
        .flat_map(|s| (0..plan.n_runs as u64).map(move |i| (*s, plan.base_seed.wrapping_add(i))))
        .collect();
    let results: Vec<Result<RunLog, BoError>> = jobs
        .par_iter()
        .map(|(strategy, seed)| match strategy {
            Strategy::Acquisition(k) => run_bo(space, objective, *k, plan.n_init, plan.n_iter, *seed),
            Strategy::RandomSearch => run_random_search(space, objective, plan.n_init, plan.n_iter, *seed),
        })
        .collect();

    let mut summary = ExperimentSummary::default();
    let mut results = results.into_iter();
    for strategy in strategies {
        let mut curves = Vec::new();
        let mut finals = Vec::new();
        let mut complete = true;
        for i in 0..plan.n_runs as u64 {
            let seed = plan.base_seed.wrapping_add(i);
            match results.next().expect("one result per job") {
                Ok(log) => {
                    let curve = best_seen_curve(&log)?;
                    finals.push((seed, *curve.last().expect("non-empty curve")));
                    curves.push(curve);
                    summary.logs.push(log);
                }
                Err(error) => {
                    complete = false;
                    if let BoError::Objective { partial, .. } = &error {
                        summary.logs.push((**partial).clone());
                    }
                    summary.failures.push(RunFailure { strategy: *strategy, seed, error });
                }
            }
        }
        let (mean, std) = aggregate(&curves);
        summary.entries.push(StrategySummary { strategy: *strategy, mean, std, finals, complete });
    }
    Ok(summary)
}

/// Acquisition with the smallest final best-seen standard deviation; ties
/// go to the smaller final mean, then to the earlier entry.
pub fn select_acquisition(summary: &ExperimentSummary) -> Result<AcquisitionKind, BoError> {
    let mut best: Option<(&StrategySummary, AcquisitionKind)> = None;
    for e in &summary.entries {
        let Strategy::Acquisition(k) = e.strategy else { continue };
        if e.mean.is_empty() {
            continue;
        }
        let replace = match &best {
            None => true,
            Some((b, _)) => {
                e.final_std() < b.final_std() || (e.final_std() == b.final_std() && e.final_mean() < b.final_mean())
            }
        };
        if replace {
            best = Some((e, k));
        }
    }
    best.map(|(_, k)| k).ok_or(BoError::EmptySummary)
}

/// `acquisition,iteration,mean,std`
pub fn write_curves_csv<W: Write>(summary: &ExperimentSummary, w: W) -> Result<(), BoError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["acquisition", "iteration", "mean", "std"])?;
    for e in &summary.entries {
        let label = e.strategy.label();
        for (k, (m, s)) in e.mean.iter().zip(&e.std).enumerate() {
            out.write_record([label.clone(), k.to_string(), m.to_string(), s.to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}

/// `acquisition,seed,final_best_seen`
pub fn write_finals_csv<W: Write>(summary: &ExperimentSummary, w: W) -> Result<(), BoError> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["acquisition", "seed", "final_best_seen"])?;
    for e in &summary.entries {
        let label = e.strategy.label();
        for (seed, v) in &e.finals {
            out.write_record([label.clone(), seed.to_string(), v.to_string()])?;
        }
    }
    out.flush()?;
    Ok(())
}

#[derive(Serialize, Deserialize)]
struct LogHeader {
    seed: u64,
    acquisition: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    xi: Option<f64>,
    n_init: usize,
    n_iter: usize,
    space_digest: String,
}

/// JSON lines: a header, then one trial per line.
pub fn write_run_log<W: Write>(log: &RunLog, mut w: W) -> Result<(), BoError> {
    let header = LogHeader {
        seed: log.seed,
        acquisition: log.strategy.label(),
        xi: match log.strategy {
            Strategy::Acquisition(k) => Some(k.xi),
            Strategy::RandomSearch => None,
        },
        n_init: log.n_init,
        n_iter: log.n_iter,
        space_digest: log.space_digest.clone(),
    };
    writeln!(w, "{}", json_line(&header))?;
    for t in &log.trials {
        writeln!(w, "{}", json_line(t))?;
    }
    w.flush()?;
    Ok(())
}

fn json_line<T: Serialize>(v: &T) -> String {
    serde_json::to_string(v).expect("log records serialize")
}

pub fn read_run_log<R: BufRead>(r: R) -> Result<RunLog, BoError> {
    let mut lines = r.lines();
    let header: LogHeader = match lines.next() {
        Some(l) => serde_json::from_str(&l?).map_err(|e| BoError::Format(format!("header: {e}")))?,
        None => return Err(BoError::Format("missing header line".into())),
    };
    let strategy = if header.acquisition == "random" {
        Strategy::RandomSearch
    } else {
        let kind = header.acquisition.parse()?;
        Strategy::Acquisition(AcquisitionKind { kind, xi: header.xi.unwrap_or_else(|| kind.default_xi()) })
    };
    let mut log = RunLog {
        seed: header.seed,
        strategy,
        n_init: header.n_init,
        n_iter: header.n_iter,
        space_digest: header.space_digest,
        trials: Vec::new(),
        incumbent: None,
    };
    for (i, l) in lines.enumerate() {
        let l = l?;
        if l.trim().is_empty() {
            continue;
        }
        let t: Trial = serde_json::from_str(&l).map_err(|e| BoError::Format(format!("line {}: {e}", i + 2)))?;
        log.push(t.phase, t.config, t.value, t.wall_time);
    }
    Ok(log)
}
