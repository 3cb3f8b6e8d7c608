//! Descriptive statistics and risk-adjusted performance measures for monthly
//! percent return series.
//!
//! Conventions: standard deviations use `n - 1`; skewness and kurtosis are
//! the plain moment ratios `m3 / m2^1.5` and `m4 / m2^2 - 3` (excess);
//! quantiles interpolate linearly between order statistics. The certainty
//! equivalent is computed on decimal returns and reported in percent.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backtest::wealth_path;
use crate::stats;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MetricsError {
    #[error("insufficient data: need {required} observations, got {actual}")]
    InsufficientData { required: usize, actual: usize },
    #[error("zero volatility")]
    ZeroVolatility,
    #[error("risk measure {0} is not positive; ratio undefined")]
    NonPositiveRisk(f64),
    #[error("no observation below the target")]
    NoDownside,
    #[error("no observation below the threshold")]
    NoLosses,
    #[error("non-finite observation")]
    NonFinite,
}

fn check(r: &[f64], required: usize) -> Result<(), MetricsError> {
    if r.len() < required {
        return Err(MetricsError::InsufficientData {
            required,
            actual: r.len(),
        });
    }
    if r.iter().any(|v| !v.is_finite()) {
        return Err(MetricsError::NonFinite);
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DescriptiveStats {
    pub observations: usize,
    pub mean: f64,
    pub std_dev: f64,
    pub variance: f64,
    pub skewness: f64,
    pub excess_kurtosis: f64,
    pub jarque_bera: f64,
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

/// `n/6 (S^2 + K^2/4)` with `K` the excess kurtosis.
pub fn jarque_bera(n: usize, skewness: f64, excess_kurtosis: f64) -> f64 {
    n as f64 / 6.0 * (skewness * skewness + excess_kurtosis * excess_kurtosis / 4.0)
}

pub fn descriptive_stats(r: &[f64]) -> Result<DescriptiveStats, MetricsError> {
    check(r, 4)?;
    let n = r.len();
    let mean = stats::mean(r);
    let variance = stats::sample_variance(r);
    let (mut m2, mut m3, mut m4) = (0.0, 0.0, 0.0);
    for x in r {
        let d = x - mean;
        let d2 = d * d;
        m2 += d2;
        m3 += d2 * d;
        m4 += d2 * d2;
    }
    let nf = n as f64;
    m2 /= nf;
    m3 /= nf;
    m4 /= nf;
    let (skewness, excess_kurtosis) = if m2 > 0.0 {
        (m3 / m2.powf(1.5), m4 / (m2 * m2) - 3.0)
    } else {
        (0.0, 0.0)
    };
    let mut sorted = r.to_vec();
    sorted.sort_by(|a, b| a.total_cmp(b));
    Ok(DescriptiveStats {
        observations: n,
        mean,
        std_dev: variance.sqrt(),
        variance,
        skewness,
        excess_kurtosis,
        jarque_bera: jarque_bera(n, skewness, excess_kurtosis),
        min: sorted[0],
        q1: stats::quantile_sorted(&sorted, 0.25),
        median: stats::quantile_sorted(&sorted, 0.5),
        q3: stats::quantile_sorted(&sorted, 0.75),
        max: sorted[n - 1],
    })
}

/// Mean over standard deviation; no risk-free deduction.
pub fn sharpe(r: &[f64]) -> Result<f64, MetricsError> {
    sharpe_excess(r, 0.0)
}

/// Sharpe ratio of `r - risk_free` (both in percent per period).
pub fn sharpe_excess(r: &[f64], risk_free: f64) -> Result<f64, MetricsError> {
    check(r, 2)?;
    let sd = stats::sample_sd(r);
    if !(sd > 0.0) {
        return Err(MetricsError::ZeroVolatility);
    }
    Ok((stats::mean(r) - risk_free) / sd)
}

/// `sqrt(12)` times the monthly Sharpe ratio.
pub fn ann_sharpe(r: &[f64]) -> Result<f64, MetricsError> {
    Ok(12f64.sqrt() * sharpe(r)?)
}

pub const DEFAULT_CONFIDENCE: f64 = 0.95;

fn tail_check(r: &[f64], alpha: f64) -> Result<(), MetricsError> {
    let required = (1.0 / (1.0 - alpha)).ceil() as usize;
    check(r, required.max(2))
}

/// Historical VaR: minus the empirical `(1 - alpha)`-quantile.
pub fn value_at_risk(r: &[f64], alpha: f64) -> Result<f64, MetricsError> {
    tail_check(r, alpha)?;
    Ok(-stats::quantile(r, 1.0 - alpha))
}

/// Historical ES: mean loss over the observations at or below the
/// `(1 - alpha)`-quantile.
pub fn expected_shortfall(r: &[f64], alpha: f64) -> Result<f64, MetricsError> {
    tail_check(r, alpha)?;
    let q = stats::quantile(r, 1.0 - alpha);
    let tail: Vec<f64> = r.iter().copied().filter(|&x| x <= q).collect();
    Ok(-stats::mean(&tail))
}

pub fn var_sharpe(r: &[f64], alpha: f64) -> Result<f64, MetricsError> {
    let var = value_at_risk(r, alpha)?;
    if !(var > 0.0) {
        return Err(MetricsError::NonPositiveRisk(var));
    }
    Ok(stats::mean(r) / var)
}

pub fn es_sharpe(r: &[f64], alpha: f64) -> Result<f64, MetricsError> {
    let es = expected_shortfall(r, alpha)?;
    if !(es > 0.0) {
        return Err(MetricsError::NonPositiveRisk(es));
    }
    Ok(stats::mean(r) / es)
}

/// Certainty equivalent under quadratic utility, in percent:
/// `100 (mean_dec - gamma/2 var_dec)`.
pub fn ceq(r: &[f64], gamma: f64) -> Result<f64, MetricsError> {
    check(r, 1)?;
    let mean = stats::mean(r) / 100.0;
    let var = if r.len() > 1 {
        stats::sample_variance(r) / 1e4
    } else {
        0.0
    };
    Ok(100.0 * (mean - 0.5 * gamma * var))
}

/// CEQ from a reported mean and standard deviation (both percent).
pub fn ceq_from_moments(mean_pct: f64, sd_pct: f64, gamma: f64) -> f64 {
    let sd = sd_pct / 100.0;
    100.0 * (mean_pct / 100.0 - 0.5 * gamma * sd * sd)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DownsideDenominator {
    /// Mean of squared shortfalls over all observations.
    #[default]
    AllObservations,
    /// Mean over the below-target observations only.
    BelowTarget,
}

pub fn sortino(r: &[f64], target: f64) -> Result<f64, MetricsError> {
    sortino_with(r, target, DownsideDenominator::default())
}

pub fn sortino_with(r: &[f64], target: f64, denom: DownsideDenominator) -> Result<f64, MetricsError> {
    check(r, 1)?;
    let (sum_sq, count) = r
        .iter()
        .filter(|&&x| x < target)
        .fold((0.0, 0usize), |(s, c), x| (s + (x - target).powi(2), c + 1));
    if count == 0 {
        return Err(MetricsError::NoDownside);
    }
    let d = match denom {
        DownsideDenominator::AllObservations => r.len(),
        DownsideDenominator::BelowTarget => count,
    };
    Ok((stats::mean(r) - target) / (sum_sq / d as f64).sqrt())
}

/// Sum of gains above `threshold` over the sum of losses below it.
pub fn omega(r: &[f64], threshold: f64) -> Result<f64, MetricsError> {
    check(r, 1)?;
    let gains: f64 = r.iter().map(|x| (x - threshold).max(0.0)).sum();
    let losses: f64 = r.iter().map(|x| (threshold - x).max(0.0)).sum();
    if !(losses > 0.0) {
        return Err(MetricsError::NoLosses);
    }
    Ok(gains / losses)
}

/// Drawdown path in percent for the wealth path of `r` (starting at 1).
pub fn drawdown_path(r: &[f64]) -> Vec<f64> {
    let mut peak = f64::MIN;
    wealth_path(r)
        .into_iter()
        .map(|w| {
            peak = peak.max(w);
            100.0 * (1.0 - w / peak)
        })
        .collect()
}

/// Largest peak-to-trough loss of the wealth path, in percent.
pub fn max_drawdown(r: &[f64]) -> f64 {
    drawdown_path(r).into_iter().fold(0.0, f64::max)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsConfig {
    pub confidence: f64,
    pub gamma: f64,
    pub sortino_target: f64,
    pub omega_threshold: f64,
    pub downside: DownsideDenominator,
    pub risk_free: f64,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            confidence: DEFAULT_CONFIDENCE,
            gamma: 1.0,
            sortino_target: 0.0,
            omega_threshold: 0.0,
            downside: DownsideDenominator::default(),
            risk_free: 0.0,
        }
    }
}

/// Every statistic for one series. Ratios that are undefined for the series
/// are `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerformanceReport {
    pub stats: DescriptiveStats,
    pub sharpe: Option<f64>,
    pub ann_sharpe: Option<f64>,
    pub var_sharpe: Option<f64>,
    pub es_sharpe: Option<f64>,
    pub ceq: f64,
    pub sortino: Option<f64>,
    pub omega: Option<f64>,
    pub max_drawdown: f64,
}

pub fn performance_report(r: &[f64], cfg: &MetricsConfig) -> Result<PerformanceReport, MetricsError> {
    let stats = descriptive_stats(r)?;
    let sharpe = sharpe_excess(r, cfg.risk_free).ok();
    Ok(PerformanceReport {
        stats,
        sharpe,
        ann_sharpe: sharpe.map(|s| 12f64.sqrt() * s),
        var_sharpe: var_sharpe(r, cfg.confidence).ok(),
        es_sharpe: es_sharpe(r, cfg.confidence).ok(),
        ceq: ceq(r, cfg.gamma)?,
        sortino: sortino_with(r, cfg.sortino_target, cfg.downside).ok(),
        omega: omega(r, cfg.omega_threshold).ok(),
        max_drawdown: max_drawdown(r),
    })
}
