//! LCB, EI and MPI acquisition functions and their maximization over a
//! finite candidate set.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{Continuous, ContinuousCDF, Normal};
use thiserror::Error;

use crate::gp::{GpModel, Posterior};
use crate::search_space::{Configuration, ParamSpec, SearchSpace};

/// Stratified values per continuous parameter in the candidate grid.
pub const CONTINUOUS_STRATA: usize = 8;
/// Uniform random candidates added to the grid.
pub const RANDOM_CANDIDATES: usize = 2048;
/// Grids larger than this fall back to random candidates only.
pub const MAX_GRID: usize = 200_000;

#[derive(Debug, Error, PartialEq)]
pub enum AcquisitionError {
    #[error("candidate set is empty")]
    EmptyCandidates,
    #[error("candidate dimension {got} does not match model dimension {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("unknown acquisition '{0}' (expected lcb, ei or mpi)")]
    Unknown(String),
    #[error("xi must be finite and non-negative, got {0}")]
    BadXi(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Acquisition {
    Lcb,
    Ei,
    Mpi,
}

impl Acquisition {
    pub const ALL: [Acquisition; 3] = [Acquisition::Lcb, Acquisition::Ei, Acquisition::Mpi];

    pub fn default_xi(self) -> f64 {
        match self {
            Acquisition::Lcb => 2.0,
            Acquisition::Ei | Acquisition::Mpi => 0.01,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Acquisition::Lcb => "lcb",
            Acquisition::Ei => "ei",
            Acquisition::Mpi => "mpi",
        }
    }
}

impl fmt::Display for Acquisition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Acquisition {
    type Err = AcquisitionError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().as_str() {
            "lcb" => Ok(Acquisition::Lcb),
            "ei" => Ok(Acquisition::Ei),
            "mpi" | "pi" => Ok(Acquisition::Mpi),
            other => Err(AcquisitionError::Unknown(other.to_string())),
        }
    }
}

/// An acquisition function with its exploration parameter ξ ≥ 0.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionKind {
    pub kind: Acquisition,
    pub xi: f64,
}

impl AcquisitionKind {
    pub fn new(kind: Acquisition, xi: f64) -> Result<Self, AcquisitionError> {
        if !xi.is_finite() || xi < 0.0 {
            return Err(AcquisitionError::BadXi(xi));
        }
        Ok(Self { kind, xi })
    }

    pub fn with_default_xi(kind: Acquisition) -> Self {
        Self { kind, xi: kind.default_xi() }
    }

    /// Ranking key, larger is better, with the same argmax as the
    /// acquisition. LCB is negated; MPI is ranked by its normal margin
    /// because Φ rounds to exactly 1 well before candidates are truly tied.
    pub fn utility(&self, p: Posterior, incumbent: f64) -> f64 {
        match self.kind {
            Acquisition::Lcb => -lcb(p, self.xi),
            Acquisition::Ei => ei(p, incumbent, self.xi),
            Acquisition::Mpi => mpi_margin(p, incumbent, self.xi),
        }
    }

    /// The acquisition value in its native orientation.
    pub fn value(&self, p: Posterior, incumbent: f64) -> f64 {
        match self.kind {
            Acquisition::Lcb => lcb(p, self.xi),
            Acquisition::Ei => ei(p, incumbent, self.xi),
            Acquisition::Mpi => mpi(p, incumbent, self.xi),
        }
    }
}

fn std_normal() -> Normal {
    Normal::new(0.0, 1.0).expect("unit normal")
}

/// μ − ξσ; minimized.
pub fn lcb(p: Posterior, xi: f64) -> f64 {
    p.mean - xi * p.std
}

/// Expected improvement below the incumbent by more than ξ.
pub fn ei(p: Posterior, incumbent: f64, xi: f64) -> f64 {
    if p.std <= 0.0 {
        return 0.0;
    }
    let n = std_normal();
    let imp = incumbent - p.mean - xi;
    let z = imp / p.std;
    (imp * n.cdf(z) + p.std * n.pdf(z)).max(0.0)
}

/// Probability that the objective falls below `incumbent + ξ`.
pub fn mpi(p: Posterior, incumbent: f64, xi: f64) -> f64 {
    if p.std <= 0.0 {
        return if p.mean <= incumbent + xi { 1.0 } else { 0.0 };
    }
    std_normal().cdf((incumbent + xi - p.mean) / p.std)
}

/// `(g⁺ + ξ − μ) / σ`, infinite with the sign of the indicator at σ = 0.
pub fn mpi_margin(p: Posterior, incumbent: f64, xi: f64) -> f64 {
    let gap = incumbent + xi - p.mean;
    if p.std <= 0.0 {
        return if gap >= 0.0 { f64::INFINITY } else { f64::NEG_INFINITY };
    }
    gap / p.std
}

/// Best observed value and where it was observed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Incumbent {
    pub best_value: f64,
    pub best_config: Configuration,
}

/// Row-major `len × dim` matrix of unit-cube candidates, each already
/// canonical (`encode(decode(u)) == u`).
#[derive(Clone, Debug, PartialEq)]
pub struct CandidateSet {
    pub dim: usize,
    pub coords: Vec<f64>,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.coords.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn point(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }
}

fn axis_values(p: &ParamSpec) -> Vec<f64> {
    let k = p.levels().map_or(CONTINUOUS_STRATA, <[f64]>::len);
    (0..k).map(|i| (i as f64 + 0.5) / k as f64).collect()
}

/// Full product grid (discrete bin centers × continuous stratum centers,
/// first parameter varying slowest) followed by seeded uniform points.
pub fn candidate_set(space: &SearchSpace, seed: u64) -> CandidateSet {
    let axes: Vec<Vec<f64>> = space.params.iter().map(axis_values).collect();
    let grid_len = axes.iter().try_fold(1usize, |acc, a| acc.checked_mul(a.len()));
    let d = space.dim();
    let mut coords = Vec::new();
    if let Some(total) = grid_len.filter(|&t| t <= MAX_GRID) {
        coords.reserve((total + RANDOM_CANDIDATES) * d);
        let mut idx = vec![0usize; d];
        for _ in 0..total {
            coords.extend(idx.iter().zip(&axes).map(|(&i, a)| a[i]));
            for j in (0..d).rev() {
                idx[j] += 1;
                if idx[j] < axes[j].len() {
                    break;
                }
                idx[j] = 0;
            }
        }
    }
    let random = space.random_unit(RANDOM_CANDIDATES, seed).expect("positive count");
    for mut u in random {
        space.canonicalize(&mut u);
        coords.extend(u);
    }
    CandidateSet { dim: d, coords }
}

fn score_with(
    model: &GpModel,
    cands: &CandidateSet,
    f: impl Fn(Posterior) -> f64 + Sync,
) -> Result<Vec<f64>, AcquisitionError> {
    if cands.dim != model.dim() {
        return Err(AcquisitionError::Dimension { expected: model.dim(), got: cands.dim });
    }
    const CHUNK: usize = 1024;
    let n = model.len();
    let mut out = vec![0.0; cands.len()];
    out.par_chunks_mut(CHUNK).enumerate().for_each(|(c, dst)| {
        let mut scratch = vec![0.0; n];
        for (k, slot) in dst.iter_mut().enumerate() {
            *slot = f(model.predict_with(cands.point(c * CHUNK + k), &mut scratch));
        }
    });
    Ok(out)
}

/// Acquisition values (native orientation) of every candidate.
pub fn score_candidates(
    model: &GpModel,
    kind: &AcquisitionKind,
    incumbent: f64,
    cands: &CandidateSet,
) -> Result<Vec<f64>, AcquisitionError> {
    score_with(model, cands, |p| kind.value(p, incumbent))
}

/// Index of the largest key; the lowest index wins ties, NaN and masked
/// entries are skipped.
fn argmax(keys: &[f64], masked: impl Fn(usize) -> bool) -> Option<usize> {
    let mut best: Option<usize> = None;
    for (i, &k) in keys.iter().enumerate() {
        if k.is_nan() || masked(i) {
            continue;
        }
        if best.is_none_or(|b| k > keys[b]) {
            best = Some(i);
        }
    }
    best
}

/// Index of the best score (max for EI/MPI, min for LCB); the lowest index
/// wins ties.
pub fn best_index(kind: Acquisition, scores: &[f64]) -> Option<usize> {
    match kind {
        Acquisition::Lcb => argmax(&scores.iter().map(|s| -s).collect::<Vec<_>>(), |_| false),
        Acquisition::Ei | Acquisition::Mpi => argmax(scores, |_| false),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Proposal {
    pub config: Configuration,
    pub unit: Vec<f64>,
    pub index: usize,
    /// Acquisition value at the proposal (native orientation).
    pub score: f64,
}

/// Maximizes the acquisition over `candidate_set(space, seed)`, skipping
/// candidates that coincide with points the model was fitted on.
pub fn propose_next(
    model: &GpModel,
    kind: &AcquisitionKind,
    incumbent: &Incumbent,
    space: &SearchSpace,
    seed: u64,
) -> Result<Proposal, AcquisitionError> {
    let cands = candidate_set(space, seed);
    propose_from(model, kind, incumbent.best_value, space, &cands)
}

/// Candidates equal to a training input of `model`.
pub fn evaluated_mask(model: &GpModel, cands: &CandidateSet) -> Vec<bool> {
    let seen: HashSet<Vec<u64>> = model.inputs().iter().map(|r| r.iter().map(|v| v.to_bits()).collect()).collect();
    (0..cands.len()).map(|i| seen.contains(&cands.point(i).iter().map(|v| v.to_bits()).collect::<Vec<u64>>())).collect()
}

pub fn propose_from(
    model: &GpModel,
    kind: &AcquisitionKind,
    incumbent: f64,
    space: &SearchSpace,
    cands: &CandidateSet,
) -> Result<Proposal, AcquisitionError> {
    let keys = score_with(model, cands, |p| kind.utility(p, incumbent))?;
    let mask = evaluated_mask(model, cands);
    let index = argmax(&keys, |i| mask[i]).ok_or(AcquisitionError::EmptyCandidates)?;
    let unit = cands.point(index).to_vec();
    let post = model.predict(&unit).expect("candidate dimension matches model");
    let config = space.decode(&unit).expect("candidate dimension matches space");
    Ok(Proposal { config, unit, index, score: kind.value(post, incumbent) })
}
