//! Prediction-error statistics and the Mann–Whitney U rank test.

use std::io::Write;

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("length mismatch: {0} vs {1}")]
    Length(usize, usize),
    #[error("need at least {needed} values, got {got}")]
    TooFew { needed: usize, got: usize },
    #[error("{0}")]
    Report(String),
}

fn check(y: &[f64], yhat: &[f64], needed: usize) -> Result<(), MetricsError> {
    if y.len() != yhat.len() {
        return Err(MetricsError::Length(y.len(), yhat.len()));
    }
    if y.len() < needed {
        return Err(MetricsError::TooFew { needed, got: y.len() });
    }
    Ok(())
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n as f64
}

pub fn mse(y: &[f64], yhat: &[f64]) -> Result<f64, MetricsError> {
    check(y, yhat, 1)?;
    Ok(mean(y.iter().zip(yhat).map(|(a, b)| (b - a).powi(2))))
}

pub fn mae(y: &[f64], yhat: &[f64]) -> Result<f64, MetricsError> {
    check(y, yhat, 1)?;
    Ok(mean(y.iter().zip(yhat).map(|(a, b)| (b - a).abs())))
}

/// Sample standard deviation (n − 1) of the absolute errors.
pub fn st_ae(y: &[f64], yhat: &[f64]) -> Result<f64, MetricsError> {
    check(y, yhat, 2)?;
    let ae: Vec<f64> = y.iter().zip(yhat).map(|(a, b)| (b - a).abs()).collect();
    let m = mean(ae.iter().copied());
    Ok((ae.iter().map(|e| (e - m).powi(2)).sum::<f64>() / (ae.len() - 1) as f64).sqrt())
}

/// `(bias², variance)` of the residuals with a 1/n variance, so that
/// `mse = bias² + variance`.
pub fn bias_variance(y: &[f64], yhat: &[f64]) -> Result<(f64, f64), MetricsError> {
    check(y, yhat, 1)?;
    let bias = mean(yhat.iter().copied()) - mean(y.iter().copied());
    let err_mean = mean(y.iter().zip(yhat).map(|(a, b)| a - b));
    let var = mean(y.iter().zip(yhat).map(|(a, b)| (a - b - err_mean).powi(2)));
    Ok((bias * bias, var))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub n: usize,
    pub mse: f64,
    pub mae: f64,
    pub st_ae: f64,
    pub bias_sq: f64,
    pub variance: f64,
}

pub fn error_summary(y: &[f64], yhat: &[f64]) -> Result<ErrorSummary, MetricsError> {
    let (bias_sq, variance) = bias_variance(y, yhat)?;
    Ok(ErrorSummary { n: y.len(), mse: mse(y, yhat)?, mae: mae(y, yhat)?, st_ae: st_ae(y, yhat)?, bias_sq, variance })
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Alternative {
    #[default]
    TwoSided,
    /// `a` tends to be smaller than `b`.
    Less,
    Greater,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TestMethod {
    Exact,
    NormalApprox,
}

/// Which p-value computation to use.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum MethodChoice {
    /// Exact when both samples have at most 12 values.
    #[default]
    Auto,
    Exact,
    Asymptotic,
}

pub const EXACT_LIMIT: usize = 12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankTestResult {
    pub u_statistic: f64,
    pub p_value: f64,
    pub method: TestMethod,
}

/// 1-based ranks with ties sharing their average rank.
pub fn midranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&i, &j| values[i].total_cmp(&values[j]));
    let mut ranks = vec![0.0; values.len()];
    let mut start = 0;
    while start < order.len() {
        let mut end = start + 1;
        while end < order.len() && values[order[end]] == values[order[start]] {
            end += 1;
        }
        let r = (start + end + 1) as f64 / 2.0;
        for &i in &order[start..end] {
            ranks[i] = r;
        }
        start = end;
    }
    ranks
}

/// U of `a`: rank sum of `a` in the pooled sample minus n(n+1)/2.
fn u_stat(ranks: &[f64], n: usize) -> f64 {
    ranks[..n].iter().sum::<f64>() - (n * (n + 1)) as f64 / 2.0
}

/// `(P(U ≤ u), P(U ≥ u))` over all C(n+m, n) equally likely assignments of
/// the pooled midranks to `a`. Midranks are half-integers, so doubled rank
/// sums are integers and the distribution is counted exactly.
fn exact_tails(ranks: &[f64], n: usize, u: f64) -> (f64, f64) {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let max_sum: usize = doubled.iter().sum();
    // counts[k][s]: subsets of size k with doubled rank sum s
    let mut counts = vec![vec![0.0f64; max_sum + 1]; n + 1];
    counts[0][0] = 1.0;
    for (seen, &r) in doubled.iter().enumerate() {
        for k in (1..=n.min(seen + 1)).rev() {
            let (lo, hi) = counts.split_at_mut(k);
            for s in (r..=max_sum).rev() {
                hi[0][s] += lo[k - 1][s - r];
            }
        }
    }
    let target = (2.0 * (u + (n * (n + 1)) as f64 / 2.0)).round() as usize;
    let total: f64 = counts[n].iter().sum();
    let le: f64 = counts[n][..=target.min(max_sum)].iter().sum();
    let ge: f64 = counts[n].get(target..).map_or(0.0, |t| t.iter().sum());
    (le / total, ge / total)
}

/// Normal approximation with tie-corrected variance and a 0.5 continuity
/// correction.
fn normal_tails(ranks: &[f64], n: usize, m: usize, u: f64) -> (f64, f64) {
    let big_n = (n + m) as f64;
    let mu = (n * m) as f64 / 2.0;
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i + 1;
        while j < sorted.len() && sorted[j] == sorted[i] {
            j += 1;
        }
        let t = (j - i) as f64;
        tie_term += t * t * t - t;
        i = j;
    }
    let var = (n * m) as f64 / 12.0 * ((big_n + 1.0) - tie_term / (big_n * (big_n - 1.0)));
    if var <= 0.0 {
        return (1.0, 1.0);
    }
    let sd = var.sqrt();
    let z = Normal::new(0.0, 1.0).expect("unit normal");
    let le = z.cdf((u - mu + 0.5) / sd);
    let ge = 1.0 - z.cdf((u - mu - 0.5) / sd);
    (le.min(1.0), ge.min(1.0))
}

pub fn mann_whitney_u(a: &[f64], b: &[f64], alternative: Alternative) -> Result<RankTestResult, MetricsError> {
    mann_whitney_u_with(a, b, alternative, MethodChoice::Auto)
}

pub fn mann_whitney_u_with(
    a: &[f64],
    b: &[f64],
    alternative: Alternative,
    method: MethodChoice,
) -> Result<RankTestResult, MetricsError> {
    if a.is_empty() || b.is_empty() {
        return Err(MetricsError::TooFew { needed: 1, got: 0 });
    }
    let (n, m) = (a.len(), b.len());
    let pooled: Vec<f64> = a.iter().chain(b).copied().collect();
    let ranks = midranks(&pooled);
    let u = u_stat(&ranks, n);
    let exact = match method {
        MethodChoice::Auto => n <= EXACT_LIMIT && m <= EXACT_LIMIT,
        MethodChoice::Exact => true,
        MethodChoice::Asymptotic => false,
    };
    let (le, ge) = if exact { exact_tails(&ranks, n, u) } else { normal_tails(&ranks, n, m, u) };
    let p = match alternative {
        Alternative::Less => le,
        Alternative::Greater => ge,
        Alternative::TwoSided => (2.0 * le.min(ge)).min(1.0),
    };
    Ok(RankTestResult {
        u_statistic: u,
        p_value: p.clamp(0.0, 1.0),
        method: if exact { TestMethod::Exact } else { TestMethod::NormalApprox },
    })
}

/// Which errors the rank test compares.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorKind {
    #[default]
    Absolute,
    Signed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub models: Vec<String>,
    pub summaries: Vec<ErrorSummary>,
    /// Two-sided p-values; `p[i][j]` compares model i with model j.
    pub p_values: Vec<Vec<f64>>,
}

pub fn model_comparison_report(
    predictions: &[(String, Vec<f64>)],
    y: &[f64],
    errors: ErrorKind,
) -> Result<ComparisonReport, MetricsError> {
    if predictions.len() < 2 {
        return Err(MetricsError::Report("comparison needs at least two models".into()));
    }
    let mut summaries = Vec::with_capacity(predictions.len());
    let mut errs = Vec::with_capacity(predictions.len());
    for (_, p) in predictions {
        summaries.push(error_summary(y, p)?);
        errs.push(
            y.iter()
                .zip(p)
                .map(|(a, b)| match errors {
                    ErrorKind::Absolute => (b - a).abs(),
                    ErrorKind::Signed => b - a,
                })
                .collect::<Vec<f64>>(),
        );
    }
    let k = predictions.len();
    let mut p_values = vec![vec![1.0; k]; k];
    for i in 0..k {
        for j in i + 1..k {
            let p = mann_whitney_u(&errs[i], &errs[j], Alternative::TwoSided)?.p_value;
            p_values[i][j] = p;
            p_values[j][i] = p;
        }
    }
    Ok(ComparisonReport { models: predictions.iter().map(|(n, _)| n.clone()).collect(), summaries, p_values })
}

/// `model,n,mse,mae,st_ae,bias_sq,variance`
pub fn write_summary_csv<W: Write>(report: &ComparisonReport, w: W) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["model", "n", "mse", "mae", "st_ae", "bias_sq", "variance"])?;
    for (name, s) in report.models.iter().zip(&report.summaries) {
        out.write_record([
            name.clone(),
            s.n.to_string(),
            s.mse.to_string(),
            s.mae.to_string(),
            s.st_ae.to_string(),
            s.bias_sq.to_string(),
            s.variance.to_string(),
        ])?;
    }
    out.flush()?;
    Ok(())
}

/// Square p-value matrix with a `model` column and one column per model.
pub fn write_pvalue_csv<W: Write>(report: &ComparisonReport, w: W) -> Result<(), csv::Error> {
    let mut out = csv::Writer::from_writer(w);
    let mut header = vec!["model".to_string()];
    header.extend(report.models.iter().cloned());
    out.write_record(&header)?;
    for (name, row) in report.models.iter().zip(&report.p_values) {
        let mut rec = vec![name.clone()];
        rec.extend(row.iter().map(f64::to_string));
        out.write_record(&rec)?;
    }
    out.flush()?;
    Ok(())
}
