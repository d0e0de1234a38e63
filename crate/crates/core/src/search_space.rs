//! Mixed discrete/continuous hyperparameter domains, their embedding into
//! the unit hypercube, and space-filling designs.

use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum SpaceError {
    #[error("invalid search space: {0}")]
    Invalid(String),
    #[error("unknown parameter '{0}'")]
    UnknownParam(String),
    #[error("missing value for parameter '{0}'")]
    MissingParam(String),
    #[error("value {value} is outside the domain of '{name}'")]
    OutOfDomain { name: String, value: f64 },
    #[error("point has {got} coordinates, space has {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("sample size must be at least 1")]
    EmptySample,
}

/// One hyperparameter: ordered numeric levels or a closed interval.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ParamSpec {
    #[serde(alias = "discrete-ordered", alias = "discrete_ordered")]
    Discrete {
        name: String,
        levels: Vec<f64>,
    },
    Continuous {
        name: String,
        lo: f64,
        hi: f64,
    },
}

impl ParamSpec {
    pub fn discrete(name: &str, levels: &[f64]) -> Self {
        Self::Discrete { name: name.to_string(), levels: levels.to_vec() }
    }

    pub fn continuous(name: &str, lo: f64, hi: f64) -> Self {
        Self::Continuous { name: name.to_string(), lo, hi }
    }

    pub fn name(&self) -> &str {
        match self {
            Self::Discrete { name, .. } | Self::Continuous { name, .. } => name,
        }
    }

    pub fn levels(&self) -> Option<&[f64]> {
        match self {
            Self::Discrete { levels, .. } => Some(levels),
            Self::Continuous { .. } => None,
        }
    }

    fn validate(&self) -> Result<(), SpaceError> {
        match self {
            Self::Discrete { name, levels } => {
                if levels.is_empty() {
                    return Err(SpaceError::Invalid(format!("'{name}' has no levels")));
                }
                if levels.iter().any(|v| !v.is_finite()) || levels.windows(2).any(|w| w[0] >= w[1]) {
                    return Err(SpaceError::Invalid(format!(
                        "levels of '{name}' must be finite and strictly increasing"
                    )));
                }
            }
            Self::Continuous { name, lo, hi } => {
                if !(lo.is_finite() && hi.is_finite() && lo < hi) {
                    return Err(SpaceError::Invalid(format!("'{name}' needs finite bounds lo < hi")));
                }
            }
        }
        Ok(())
    }

    /// Unit coordinate of a value; discrete levels map to their bin centers.
    pub fn encode_value(&self, value: f64) -> Result<f64, SpaceError> {
        match self {
            Self::Discrete { name, levels } => {
                let i = levels
                    .iter()
                    .position(|&l| l == value)
                    .ok_or_else(|| SpaceError::OutOfDomain { name: name.clone(), value })?;
                Ok((i as f64 + 0.5) / levels.len() as f64)
            }
            Self::Continuous { name, lo, hi } => {
                if !(*lo..=*hi).contains(&value) {
                    return Err(SpaceError::OutOfDomain { name: name.clone(), value });
                }
                Ok((value - lo) / (hi - lo))
            }
        }
    }

    /// Value at a unit coordinate (clamped to `[0, 1]`); 1.0 lands in the last bin.
    pub fn decode_value(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        match self {
            Self::Discrete { levels, .. } => levels[level_index(u, levels.len())],
            Self::Continuous { lo, hi, .. } => lo + u * (hi - lo),
        }
    }

    /// Snaps a coordinate to what `decode` followed by `encode` would give.
    pub fn canonical_coord(&self, u: f64) -> f64 {
        let u = u.clamp(0.0, 1.0);
        match self {
            Self::Discrete { levels, .. } => {
                let k = levels.len();
                (level_index(u, k) as f64 + 0.5) / k as f64
            }
            Self::Continuous { .. } => u,
        }
    }
}

fn level_index(u: f64, k: usize) -> usize {
    ((u * k as f64).floor() as usize).min(k - 1)
}

/// A point θ of the search space, keyed by parameter name.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Configuration(pub BTreeMap<String, f64>);

impl Configuration {
    pub fn get(&self, name: &str) -> Option<f64> {
        self.0.get(name).copied()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub params: Vec<ParamSpec>,
}

pub const CONVLSTM_MAPS: [&str; 4] = ["convlstm1_maps", "convlstm2_maps", "convlstm3_maps", "convlstm4_maps"];
pub const CONV3D_MAPS: &str = "conv3d_maps";
pub const FC_NEURONS: &str = "fc_neurons";
pub const DROPOUT: &str = "dropout";
pub const LEARNING_RATE: &str = "learning_rate";

/// The ST-LSTM hyperparameter domain: four ConvLSTM widths, the 3-D
/// convolution width, the dense width, dropout and the Adam learning rate.
pub fn build_stlstm_space() -> SearchSpace {
    let mut params: Vec<ParamSpec> =
        CONVLSTM_MAPS.iter().map(|n| ParamSpec::discrete(n, &[4.0, 8.0, 10.0, 16.0])).collect();
    params.push(ParamSpec::discrete(CONV3D_MAPS, &[1.0, 2.0, 3.0]));
    params.push(ParamSpec::discrete(FC_NEURONS, &[5.0, 10.0, 25.0, 50.0]));
    params.push(ParamSpec::continuous(DROPOUT, 0.0, 0.5));
    params.push(ParamSpec::discrete(LEARNING_RATE, &[1e-5, 1e-4, 1e-3, 1e-2]));
    SearchSpace { params }
}

impl SearchSpace {
    pub fn new(params: Vec<ParamSpec>) -> Result<Self, SpaceError> {
        let space = Self { params };
        space.validate()?;
        Ok(space)
    }

    pub fn validate(&self) -> Result<(), SpaceError> {
        if self.params.is_empty() {
            return Err(SpaceError::Invalid("a search space needs at least one parameter".into()));
        }
        let mut seen = HashSet::new();
        for p in &self.params {
            p.validate()?;
            if !seen.insert(p.name()) {
                return Err(SpaceError::Invalid(format!("duplicate parameter name '{}'", p.name())));
            }
        }
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, SpaceError> {
        let space: Self = serde_json::from_str(text).map_err(|e| SpaceError::Invalid(e.to_string()))?;
        space.validate()?;
        Ok(space)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("search space serializes")
    }

    /// SHA-256 of the canonical JSON form.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }

    pub fn dim(&self) -> usize {
        self.params.len()
    }

    /// Number of discrete level combinations (continuous params ignored).
    pub fn discrete_cardinality(&self) -> usize {
        self.params.iter().filter_map(|p| p.levels()).map(<[f64]>::len).product()
    }

    pub fn contains(&self, cfg: &Configuration) -> bool {
        self.encode(cfg).is_ok()
    }

    pub fn encode(&self, cfg: &Configuration) -> Result<Vec<f64>, SpaceError> {
        if let Some(extra) = cfg.0.keys().find(|k| !self.params.iter().any(|p| p.name() == k.as_str())) {
            return Err(SpaceError::UnknownParam(extra.clone()));
        }
        self.params
            .iter()
            .map(|p| {
                let v = cfg.get(p.name()).ok_or_else(|| SpaceError::MissingParam(p.name().to_string()))?;
                p.encode_value(v)
            })
            .collect()
    }

    pub fn decode(&self, u: &[f64]) -> Result<Configuration, SpaceError> {
        if u.len() != self.dim() {
            return Err(SpaceError::Dimension { expected: self.dim(), got: u.len() });
        }
        Ok(Configuration(self.params.iter().zip(u).map(|(p, &x)| (p.name().to_string(), p.decode_value(x))).collect()))
    }

    /// `encode(decode(u))` without building a configuration.
    pub fn canonicalize(&self, u: &mut [f64]) {
        for (p, x) in self.params.iter().zip(u.iter_mut()) {
            *x = p.canonical_coord(*x);
        }
    }

    /// Latin hypercube design on the unit cube (before decoding).
    pub fn lhs_unit(&self, n: usize, seed: u64) -> Result<Vec<Vec<f64>>, SpaceError> {
        if n == 0 {
            return Err(SpaceError::EmptySample);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut points = vec![vec![0.0; self.dim()]; n];
        let mut strata: Vec<usize> = (0..n).collect();
        for j in 0..self.dim() {
            strata.shuffle(&mut rng);
            for (point, &s) in points.iter_mut().zip(&strata) {
                point[j] = (s as f64 + rng.gen::<f64>()) / n as f64;
            }
        }
        Ok(points)
    }

    pub fn lhs_sample(&self, n: usize, seed: u64) -> Result<Vec<Configuration>, SpaceError> {
        self.lhs_unit(n, seed)?.iter().map(|u| self.decode(u)).collect()
    }

    pub fn random_unit(&self, n: usize, seed: u64) -> Result<Vec<Vec<f64>>, SpaceError> {
        if n == 0 {
            return Err(SpaceError::EmptySample);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok((0..n).map(|_| (0..self.dim()).map(|_| rng.gen::<f64>()).collect()).collect())
    }

    pub fn random_sample(&self, n: usize, seed: u64) -> Result<Vec<Configuration>, SpaceError> {
        self.random_unit(n, seed)?.iter().map(|u| self.decode(u)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stlstm_space_shape() {
        let s = build_stlstm_space();
        assert_eq!(s.dim(), 8);
        assert_eq!(s.params.iter().filter(|p| p.levels().is_some()).count(), 7);
        assert_eq!(s.discrete_cardinality(), 12288);
        let lr = s.params.iter().find(|p| p.name() == LEARNING_RATE).unwrap();
        assert_eq!(lr.levels().unwrap(), &[0.00001, 0.0001, 0.001, 0.01]);
        s.validate().unwrap();
    }

    #[test]
    fn encode_examples() {
        let dropout = ParamSpec::continuous(DROPOUT, 0.0, 0.5);
        assert_eq!(dropout.encode_value(0.0).unwrap(), 0.0);
        assert_eq!(dropout.encode_value(0.5).unwrap(), 1.0);
        let maps = ParamSpec::discrete("m", &[4.0, 8.0, 10.0, 16.0]);
        assert_eq!(maps.encode_value(8.0).unwrap(), 0.375);
        assert!(maps.encode_value(9.0).is_err());
        assert!(dropout.encode_value(0.6).is_err());
    }

    #[test]
    fn decode_bins() {
        let maps = ParamSpec::discrete("m", &[4.0, 8.0, 10.0, 16.0]);
        assert_eq!(maps.decode_value(0.999), 16.0);
        assert_eq!(maps.decode_value(1.0), 16.0);
        assert_eq!(maps.decode_value(0.0), 4.0);
        assert_eq!(maps.decode_value(0.25), 8.0);
        let s = build_stlstm_space();
        assert!(matches!(s.decode(&[0.5; 7]), Err(SpaceError::Dimension { .. })));
    }

    #[test]
    fn encode_rejects_unknown_and_missing() {
        let s = build_stlstm_space();
        let mut cfg = s.decode(&[0.1; 8]).unwrap();
        cfg.0.insert("bogus".into(), 1.0);
        assert_eq!(s.encode(&cfg), Err(SpaceError::UnknownParam("bogus".into())));
        let mut cfg = s.decode(&[0.1; 8]).unwrap();
        cfg.0.remove(DROPOUT);
        assert_eq!(s.encode(&cfg), Err(SpaceError::MissingParam(DROPOUT.into())));
    }

    #[test]
    fn invalid_spaces_are_rejected() {
        assert!(SearchSpace::new(vec![]).is_err());
        assert!(SearchSpace::new(vec![ParamSpec::discrete("a", &[2.0, 1.0])]).is_err());
        assert!(SearchSpace::new(vec![ParamSpec::discrete("a", &[])]).is_err());
        assert!(SearchSpace::new(vec![ParamSpec::continuous("a", 1.0, 1.0)]).is_err());
        assert!(SearchSpace::new(vec![ParamSpec::continuous("a", 0.0, 1.0), ParamSpec::discrete("a", &[1.0])]).is_err());
    }

    #[test]
    fn json_roundtrip() {
        let s = build_stlstm_space();
        let text = s.to_json();
        assert!(text.starts_with(r#"{"params":[{"kind":"discrete","name":"convlstm1_maps","levels":[4.0"#));
        assert_eq!(SearchSpace::from_json(&text).unwrap(), s);
        let alt = r#"{"params":[{"name":"x","kind":"continuous","lo":-1,"hi":1},{"name":"k","kind":"discrete-ordered","levels":[1,2]}]}"#;
        assert_eq!(SearchSpace::from_json(alt).unwrap().dim(), 2);
    }

    #[test]
    fn lhs_stratification_and_determinism() {
        let s = build_stlstm_space();
        let pts = s.lhs_unit(5, 9).unwrap();
        for j in 0..8 {
            let mut strata: Vec<usize> = pts.iter().map(|p| (p[j] * 5.0).floor() as usize).collect();
            strata.sort_unstable();
            assert_eq!(strata, vec![0, 1, 2, 3, 4]);
        }
        assert_eq!(s.lhs_sample(5, 9).unwrap(), s.lhs_sample(5, 9).unwrap());
        assert!(s.lhs_sample(5, 9).unwrap().iter().all(|c| s.contains(c)));
        assert_eq!(s.lhs_sample(0, 1), Err(SpaceError::EmptySample));
        assert_eq!(s.random_sample(0, 1), Err(SpaceError::EmptySample));
    }
}
