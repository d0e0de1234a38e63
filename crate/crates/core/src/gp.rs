//! Gaussian-process regression with a Matérn 5/2 ARD kernel.
//!
//! Targets are standardized before fitting; kernel hyperparameters are
//! chosen by multi-start projected gradient ascent on the log marginal
//! likelihood in log-parameter space.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

const SQRT5: f64 = 2.236_067_977_499_79;
const LN_2PI: f64 = 1.837_877_066_409_345_5;

pub const JITTER_START: f64 = 1e-10;
pub const JITTER_MAX: f64 = 1e-4;
pub const NOISE_FLOOR: f64 = 1e-8;
pub const N_STARTS: usize = 10;

/// Search box for hyperparameters (natural scale).
const LENGTHSCALE_BOUNDS: (f64, f64) = (1e-2, 1e2);
const SIGNAL_BOUNDS: (f64, f64) = (1e-2, 1e2);
const NOISE_BOUNDS: (f64, f64) = (NOISE_FLOOR, 1.0);

#[derive(Debug, Error, PartialEq)]
pub enum GpError {
    #[error("training data must contain at least one point")]
    Empty,
    #[error("non-finite value in training data")]
    NonFinite,
    #[error("dimension mismatch: expected {expected}, got {got}")]
    Dimension { expected: usize, got: usize },
    #[error("covariance matrix is not positive definite even with jitter {0:e}")]
    Cholesky(f64),
    #[error("invalid kernel parameters: {0}")]
    Kernel(String),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelParams {
    pub lengthscales: Vec<f64>,
    pub signal_variance: f64,
    pub noise_variance: f64,
}

impl KernelParams {
    pub fn isotropic(d: usize, lengthscale: f64, signal_variance: f64, noise_variance: f64) -> Self {
        Self { lengthscales: vec![lengthscale; d], signal_variance, noise_variance }
    }

    fn validate(&self, d: usize) -> Result<(), GpError> {
        if self.lengthscales.len() != d {
            return Err(GpError::Dimension { expected: d, got: self.lengthscales.len() });
        }
        let ok = self.lengthscales.iter().all(|l| l.is_finite() && *l > 0.0)
            && self.signal_variance.is_finite()
            && self.signal_variance > 0.0
            && self.noise_variance.is_finite()
            && self.noise_variance >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(GpError::Kernel(format!("{self:?}")))
        }
    }

    /// `[ln ℓ₁ … ln ℓ_d, ln σf², ln σn²]`
    fn to_log(&self) -> Vec<f64> {
        let mut v: Vec<f64> = self.lengthscales.iter().map(|l| l.ln()).collect();
        v.push(self.signal_variance.ln());
        v.push(self.noise_variance.ln());
        v
    }

    fn from_log(v: &[f64]) -> Self {
        let d = v.len() - 2;
        Self {
            lengthscales: v[..d].iter().map(|x| x.exp()).collect(),
            signal_variance: v[d].exp(),
            noise_variance: v[d + 1].exp(),
        }
    }

    /// Matérn 5/2 covariance between two points.
    pub fn k(&self, a: &[f64], b: &[f64]) -> f64 {
        let r = self.scaled_distance(a, b);
        self.signal_variance * (1.0 + SQRT5 * r + 5.0 / 3.0 * r * r) * (-SQRT5 * r).exp()
    }

    fn scaled_distance(&self, a: &[f64], b: &[f64]) -> f64 {
        a.iter()
            .zip(b)
            .zip(&self.lengthscales)
            .map(|((x, y), l)| {
                let t = (x - y) / l;
                t * t
            })
            .sum::<f64>()
            .sqrt()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Posterior {
    pub mean: f64,
    pub std: f64,
}

fn check_data(x: &[Vec<f64>], y: &[f64]) -> Result<usize, GpError> {
    if x.is_empty() {
        return Err(GpError::Empty);
    }
    if x.len() != y.len() {
        return Err(GpError::Dimension { expected: x.len(), got: y.len() });
    }
    let d = x[0].len();
    if let Some(bad) = x.iter().find(|r| r.len() != d) {
        return Err(GpError::Dimension { expected: d, got: bad.len() });
    }
    if x.iter().flatten().chain(y).any(|v| !v.is_finite()) {
        return Err(GpError::NonFinite);
    }
    Ok(d)
}

fn covariance(x: &[Vec<f64>], kernel: &KernelParams) -> DMatrix<f64> {
    let n = x.len();
    DMatrix::from_fn(n, n, |i, j| kernel.k(&x[i], &x[j]))
}

/// Cholesky of `K + (σn² + jitter) I`, escalating the jitter ×10 from
/// 1e-10 up to 1e-4.
fn factor(k: &DMatrix<f64>, noise: f64) -> Result<(DMatrix<f64>, f64), GpError> {
    let n = k.nrows();
    let mut jitter = JITTER_START;
    loop {
        let mut a = k.clone();
        for i in 0..n {
            a[(i, i)] += noise + jitter;
        }
        if let Some(ch) = a.cholesky() {
            return Ok((ch.unpack(), jitter));
        }
        if jitter >= JITTER_MAX {
            return Err(GpError::Cholesky(jitter));
        }
        jitter *= 10.0;
    }
}

struct LmlParts {
    value: f64,
    /// Gradient with respect to the log parameters.
    grad: Vec<f64>,
}

fn lml_with_grad(x: &[Vec<f64>], y: &[f64], kernel: &KernelParams) -> Result<LmlParts, GpError> {
    let n = x.len();
    let d = kernel.lengthscales.len();
    let k = covariance(x, kernel);
    let (l, _) = factor(&k, kernel.noise_variance)?;
    let yv = DVector::from_column_slice(y);
    let z = l.solve_lower_triangular(&yv).ok_or(GpError::Cholesky(0.0))?;
    let alpha = l.tr_solve_lower_triangular(&z).ok_or(GpError::Cholesky(0.0))?;
    let log_det: f64 = 2.0 * l.diagonal().iter().map(|v| v.ln()).sum::<f64>();
    let value = -0.5 * yv.dot(&alpha) - 0.5 * log_det - 0.5 * n as f64 * LN_2PI;

    // W = αᵀα − K⁻¹; dLML/dθ = ½ tr(W ∂K/∂θ)
    let linv = l.solve_lower_triangular(&DMatrix::identity(n, n)).ok_or(GpError::Cholesky(0.0))?;
    let kinv = linv.transpose() * &linv;
    let w = &alpha * alpha.transpose() - kinv;

    let mut grad = vec![0.0; d + 2];
    for i in 0..n {
        for j in 0..n {
            let wij = w[(i, j)];
            let r = kernel.scaled_distance(&x[i], &x[j]);
            let e = (-SQRT5 * r).exp();
            let common = kernel.signal_variance * 5.0 / 3.0 * (1.0 + SQRT5 * r) * e;
            for (g, ((a, b), ls)) in grad.iter_mut().zip(x[i].iter().zip(&x[j]).zip(&kernel.lengthscales)) {
                let t = (a - b) / ls;
                *g += 0.5 * wij * common * t * t;
            }
            grad[d] += 0.5 * wij * k[(i, j)];
        }
        grad[d + 1] += 0.5 * w[(i, i)] * kernel.noise_variance;
    }
    Ok(LmlParts { value, grad })
}

/// `−½ yᵀ(K+σn²I)⁻¹y − ½ log det(K+σn²I) − (n/2) log 2π` for the given
/// targets (callers pass standardized targets).
pub fn log_marginal_likelihood(x: &[Vec<f64>], y: &[f64], kernel: &KernelParams) -> Result<f64, GpError> {
    let d = check_data(x, y)?;
    kernel.validate(d)?;
    Ok(lml_with_grad(x, y, kernel)?.value)
}

/// Analytic gradient of the log marginal likelihood with respect to
/// `[ln ℓ₁ … ln ℓ_d, ln σf², ln σn²]`.
pub fn log_marginal_likelihood_grad(x: &[Vec<f64>], y: &[f64], kernel: &KernelParams) -> Result<Vec<f64>, GpError> {
    let d = check_data(x, y)?;
    kernel.validate(d)?;
    Ok(lml_with_grad(x, y, kernel)?.grad)
}

fn bounds(d: usize) -> Vec<(f64, f64)> {
    let ln = |(a, b): (f64, f64)| (f64::ln(a), f64::ln(b));
    let mut b = vec![ln(LENGTHSCALE_BOUNDS); d];
    b.push(ln(SIGNAL_BOUNDS));
    b.push(ln(NOISE_BOUNDS));
    b
}

fn project(theta: &mut [f64], b: &[(f64, f64)]) {
    for (t, (lo, hi)) in theta.iter_mut().zip(b) {
        *t = t.clamp(*lo, *hi);
    }
}

/// Projected gradient ascent with backtracking.
fn ascend(x: &[Vec<f64>], y: &[f64], start: Vec<f64>, b: &[(f64, f64)]) -> Option<(f64, Vec<f64>)> {
    const MAX_ITERS: usize = 60;
    let mut theta = start;
    project(&mut theta, b);
    let mut cur = lml_with_grad(x, y, &KernelParams::from_log(&theta)).ok()?;
    let mut step = 0.5;
    for _ in 0..MAX_ITERS {
        let gnorm = cur.grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if gnorm < 1e-6 {
            break;
        }
        let mut improved = false;
        for _ in 0..20 {
            let mut cand: Vec<f64> = theta.iter().zip(&cur.grad).map(|(t, g)| t + step * g / gnorm.max(1.0)).collect();
            project(&mut cand, b);
            if let Ok(next) = lml_with_grad(x, y, &KernelParams::from_log(&cand)) {
                if next.value > cur.value + 1e-10 {
                    let moved = cand.iter().zip(&theta).map(|(a, c)| (a - c).abs()).fold(0.0, f64::max);
                    theta = cand;
                    cur = next;
                    step = (step * 2.0).min(4.0);
                    improved = moved > 1e-9;
                    break;
                }
            }
            step *= 0.5;
        }
        if !improved {
            break;
        }
    }
    Some((cur.value, theta))
}

/// A fitted surrogate. Immutable; `predict` may be called from many threads.
#[derive(Clone, Debug)]
pub struct GpModel {
    x: Vec<Vec<f64>>,
    y_raw: Vec<f64>,
    y_mean: f64,
    y_std: f64,
    kernel: KernelParams,
    /// Row-major lower Cholesky factor.
    chol: Vec<f64>,
    alpha: Vec<f64>,
    jitter: f64,
    seed: u64,
}

fn standardize(y: &[f64]) -> (Vec<f64>, f64, f64) {
    let n = y.len() as f64;
    let mean = y.iter().sum::<f64>() / n;
    let var = y.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    let std = if var.sqrt() > 1e-12 * mean.abs().max(1.0) { var.sqrt() } else { 1.0 };
    (y.iter().map(|v| (v - mean) / std).collect(), mean, std)
}

impl GpModel {
    /// Fits kernel hyperparameters by maximum marginal likelihood.
    pub fn fit(x: &[Vec<f64>], y: &[f64], seed: u64) -> Result<Self, GpError> {
        let d = check_data(x, y)?;
        let (ys, _, _) = standardize(y);
        let b = bounds(d);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut starts = vec![KernelParams::isotropic(d, 0.5, 1.0, 1e-4).to_log()];
        while starts.len() < N_STARTS {
            starts.push(b.iter().map(|(lo, hi)| rng.gen_range(*lo..=*hi)).collect());
        }
        let mut best: Option<(f64, Vec<f64>)> = None;
        for s in starts {
            if let Some((v, theta)) = ascend(x, &ys, s, &b) {
                if best.as_ref().is_none_or(|(bv, _)| v > *bv) {
                    best = Some((v, theta));
                }
            }
        }
        let (_, theta) = best.ok_or(GpError::Cholesky(JITTER_MAX))?;
        let mut model = Self::with_kernel(x, y, KernelParams::from_log(&theta))?;
        model.seed = seed;
        Ok(model)
    }

    /// Conditions on the data with fixed kernel parameters.
    pub fn with_kernel(x: &[Vec<f64>], y: &[f64], kernel: KernelParams) -> Result<Self, GpError> {
        let d = check_data(x, y)?;
        kernel.validate(d)?;
        let n = x.len();
        let (ys, y_mean, y_std) = standardize(y);
        let (l, jitter) = factor(&covariance(x, &kernel), kernel.noise_variance)?;
        let yv = DVector::from_column_slice(&ys);
        let z = l.solve_lower_triangular(&yv).ok_or(GpError::Cholesky(jitter))?;
        let alpha = l.tr_solve_lower_triangular(&z).ok_or(GpError::Cholesky(jitter))?;
        let mut chol = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..=i {
                chol[i * n + j] = l[(i, j)];
            }
        }
        Ok(Self {
            x: x.to_vec(),
            y_raw: y.to_vec(),
            y_mean,
            y_std,
            kernel,
            chol,
            alpha: alpha.iter().copied().collect(),
            jitter,
            seed: 0,
        })
    }

    /// Refits on the data plus one observation.
    pub fn update(&self, u: &[f64], value: f64) -> Result<Self, GpError> {
        if !value.is_finite() {
            return Err(GpError::NonFinite);
        }
        let mut x = self.x.clone();
        x.push(u.to_vec());
        let mut y = self.y_raw.clone();
        y.push(value);
        Self::fit(&x, &y, self.seed)
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.kernel.lengthscales.len()
    }

    /// Training inputs in fit order.
    pub fn inputs(&self) -> &[Vec<f64>] {
        &self.x
    }

    pub fn kernel(&self) -> &KernelParams {
        &self.kernel
    }

    pub fn jitter(&self) -> f64 {
        self.jitter
    }

    pub fn y_mean(&self) -> f64 {
        self.y_mean
    }

    pub fn y_std(&self) -> f64 {
        self.y_std
    }

    /// Reconstructs `L Lᵀ`.
    pub fn reconstructed_covariance(&self) -> DMatrix<f64> {
        let n = self.len();
        let l = DMatrix::from_row_slice(n, n, &self.chol);
        &l * l.transpose()
    }

    pub fn predict(&self, u: &[f64]) -> Result<Posterior, GpError> {
        if u.len() != self.dim() {
            return Err(GpError::Dimension { expected: self.dim(), got: u.len() });
        }
        let mut scratch = vec![0.0; self.len()];
        Ok(self.predict_with(u, &mut scratch))
    }

    /// Allocation-free prediction; `scratch` must have length `len()`.
    pub fn predict_with(&self, u: &[f64], scratch: &mut [f64]) -> Posterior {
        let n = self.len();
        let mut mean = 0.0;
        for (i, (xi, a)) in self.x.iter().zip(&self.alpha).enumerate() {
            let k = self.kernel.k(u, xi);
            scratch[i] = k;
            mean += k * a;
        }
        // v = L⁻¹ k*, in place
        let mut quad = 0.0;
        for i in 0..n {
            let row = &self.chol[i * n..i * n + i];
            let s: f64 = row.iter().zip(&scratch[..i]).map(|(l, v)| l * v).sum();
            let v = (scratch[i] - s) / self.chol[i * n + i];
            scratch[i] = v;
            quad += v * v;
        }
        let var = (self.kernel.signal_variance - quad).max(0.0);
        Posterior { mean: self.y_mean + self.y_std * mean, std: self.y_std * var.sqrt() }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matern(r: f64) -> f64 {
        (1.0 + SQRT5 * r + 5.0 / 3.0 * r * r) * (-SQRT5 * r).exp()
    }

    #[test]
    fn single_point_lml() {
        let k = KernelParams::isotropic(1, 1.0, 0.75, 0.25);
        let v = log_marginal_likelihood(&[vec![0.3]], &[0.0], &k).unwrap();
        assert!((v + 0.918_938_533_204_672_7).abs() < 1e-9, "{v}");
    }

    #[test]
    fn log_det_grows_with_noise() {
        let x = vec![vec![0.1], vec![0.4], vec![0.9]];
        let y = vec![0.0; 3];
        let mut prev = f64::INFINITY;
        for noise in [1e-6, 1e-4, 1e-2, 1.0] {
            // with y = 0 the LML is −½ log det − const
            let v = log_marginal_likelihood(&x, &y, &KernelParams::isotropic(1, 0.3, 1.0, noise)).unwrap();
            assert!(v < prev);
            prev = v;
        }
    }

    #[test]
    fn one_point_fit_predicts_datum() {
        let m = GpModel::fit(&[vec![0.5]], &[3.0], 1).unwrap();
        let p = m.predict(&[0.5]).unwrap();
        assert!((p.mean - 3.0).abs() < 1e-9);
        assert!(p.std < 1e-3, "{}", p.std);
    }

    #[test]
    fn duplicate_rows_fit() {
        let x = vec![vec![0.2, 0.3], vec![0.2, 0.3], vec![0.8, 0.1]];
        let m = GpModel::fit(&x, &[1.0, 1.0, 2.0], 3).unwrap();
        let p = m.predict(&[0.2, 0.3]).unwrap();
        assert!((p.mean - 1.0).abs() < 1e-3);
        let fixed = GpModel::with_kernel(&x, &[1.0, 1.0, 2.0], KernelParams::isotropic(2, 0.5, 1.0, 0.0)).unwrap();
        assert!(fixed.jitter() >= JITTER_START);
        assert!((fixed.predict(&[0.2, 0.3]).unwrap().mean - 1.0).abs() < 1e-6);
    }

    #[test]
    fn two_point_closed_form() {
        let kern = KernelParams::isotropic(1, 0.4, 1.7, 0.05);
        let x = vec![vec![0.2], vec![0.7]];
        let y = vec![1.0, 3.0];
        let m = GpModel::with_kernel(&x, &y, kern.clone()).unwrap();
        // standardized targets are ∓1, mean 2, std 1
        let (ys, mu, sd) = ([-1.0, 1.0], 2.0, 1.0);
        let s = 1.7;
        let a = s + 0.05 + JITTER_START;
        let b = s * matern(0.5 / 0.4);
        let det = a * a - b * b;
        let inv = [[a / det, -b / det], [-b / det, a / det]];
        for u in [0.0, 0.45, 0.9] {
            let ks = [s * matern((u - 0.2f64).abs() / 0.4), s * matern((u - 0.7f64).abs() / 0.4)];
            let w = [inv[0][0] * ks[0] + inv[0][1] * ks[1], inv[1][0] * ks[0] + inv[1][1] * ks[1]];
            let mean = mu + sd * (w[0] * ys[0] + w[1] * ys[1]);
            let var = s - (ks[0] * w[0] + ks[1] * w[1]);
            let p = m.predict(&[u]).unwrap();
            assert!((p.mean - mean).abs() < 1e-10);
            assert!((p.std - sd * var.sqrt()).abs() < 1e-10);
        }
    }
}
