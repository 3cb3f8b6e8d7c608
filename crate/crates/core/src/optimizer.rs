//! Mean-variance and minimum-variance weights under full investment and a
//! common lower bound on every weight.
//!
//! Both problems are instances of
//!
//! ```text
//! minimize 1/2 w'Hw - c'w   subject to   1'w = 1,   w_i >= l
//! ```
//!
//! (`H = gamma Sigma, c = mu` for utility maximization, `H = Sigma, c = 0`
//! for minimum variance), solved by a primal active-set method whose result
//! is checked against the KKT conditions before it is returned.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum OptimError {
    #[error("lower bound {lower_bound} is infeasible for {n_assets} assets (must be <= 1/N)")]
    Infeasible { lower_bound: f64, n_assets: usize },
    #[error("solver failed: {0}")]
    SolverFailure(String),
    #[error("KKT residual {residual:.3e} above tolerance")]
    KktViolation { residual: f64 },
    #[error("strategy {0} cannot be solved by this routine")]
    WrongKind(StrategyKind),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("invalid strategy specification: {0}")]
    InvalidSpec(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum StrategyKind {
    /// Equal weights at inception, never rebalanced.
    EW,
    /// Utility maximization with short sales down to the lower bound.
    MVS,
    /// Long-only utility maximization.
    MVSC,
    /// Minimum variance with short sales down to the lower bound.
    MIN,
    /// Long-only minimum variance.
    MINC,
}

impl StrategyKind {
    pub fn default_lower_bound(self) -> f64 {
        match self {
            StrategyKind::MVS | StrategyKind::MIN => -0.5,
            StrategyKind::EW | StrategyKind::MVSC | StrategyKind::MINC => 0.0,
        }
    }
}

impl fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            StrategyKind::EW => "EW",
            StrategyKind::MVS => "MVS",
            StrategyKind::MVSC => "MVSC",
            StrategyKind::MIN => "MIN",
            StrategyKind::MINC => "MINC",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum CovarianceSource {
    Global,
    Local,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategySpec {
    pub kind: StrategyKind,
    pub covariance: CovarianceSource,
    pub gamma: f64,
    pub lower_bound: f64,
}

impl StrategySpec {
    /// Standard specification: `gamma = 1` and the kind's default bound
    /// (-50% for MVS/MIN, 0 for the long-only variants).
    pub fn new(kind: StrategyKind, covariance: CovarianceSource) -> Self {
        Self {
            kind,
            covariance,
            gamma: 1.0,
            lower_bound: kind.default_lower_bound(),
        }
    }

    /// The nine strategies: EW plus each optimized kind with global and
    /// local covariance.
    pub fn all() -> Vec<Self> {
        use CovarianceSource::*;
        use StrategyKind::*;
        let mut v = vec![Self::new(EW, Global)];
        for src in [Global, Local] {
            for kind in [MVS, MVSC, MIN, MINC] {
                v.push(Self::new(kind, src));
            }
        }
        v
    }

    pub fn uses_local(&self) -> bool {
        self.kind != StrategyKind::EW && self.covariance == CovarianceSource::Local
    }

    pub fn validate(&self, n_assets: usize) -> Result<(), OptimError> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(OptimError::InvalidSpec(format!("gamma must be positive, got {}", self.gamma)));
        }
        if self.kind != StrategyKind::EW && self.lower_bound > 1.0 / n_assets as f64 {
            return Err(OptimError::Infeasible {
                lower_bound: self.lower_bound,
                n_assets,
            });
        }
        Ok(())
    }

    /// Display name such as `MVS` or `MINC-L`.
    pub fn name(&self) -> String {
        if self.uses_local() {
            format!("{}-L", self.kind)
        } else {
            self.kind.to_string()
        }
    }
}

impl FromStr for StrategySpec {
    type Err = OptimError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let (base, src) = match s.strip_suffix("-L") {
            Some(b) => (b, CovarianceSource::Local),
            None => (s, CovarianceSource::Global),
        };
        let kind = match base {
            "EW" => StrategyKind::EW,
            "MVS" => StrategyKind::MVS,
            "MVSC" => StrategyKind::MVSC,
            "MIN" => StrategyKind::MIN,
            "MINC" => StrategyKind::MINC,
            _ => return Err(OptimError::InvalidSpec(format!("unknown strategy {s:?}"))),
        };
        if kind == StrategyKind::EW && src == CovarianceSource::Local {
            return Err(OptimError::InvalidSpec("EW has no local variant".into()));
        }
        Ok(Self::new(kind, src))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector(pub Vec<f64>);

impl WeightVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }
}

pub fn equal_weights(n_assets: usize) -> WeightVector {
    WeightVector(vec![1.0 / n_assets as f64; n_assets])
}

/// KKT residuals of a candidate solution.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct KktReport {
    /// Multiplier of the budget constraint.
    pub budget_multiplier: f64,
    pub stationarity: f64,
    pub dual_infeasibility: f64,
    pub primal_infeasibility: f64,
    pub complementarity: f64,
}

impl KktReport {
    pub fn max_residual(&self) -> f64 {
        self.stationarity
            .max(self.dual_infeasibility)
            .max(self.primal_infeasibility)
            .max(self.complementarity)
    }
}

/// Weights within this distance of the bound count as active when checking
/// optimality conditions.
const ACTIVE_TOL: f64 = 1e-12;

pub fn kkt_report(h: &DMatrix<f64>, c: &[f64], lower: f64, w: &[f64]) -> KktReport {
    let wv = DVector::from_column_slice(w);
    let g: Vec<f64> = (h * &wv).iter().zip(c).map(|(a, b)| a - b).collect();
    let active: Vec<bool> = w.iter().map(|&x| x - lower <= ACTIVE_TOL).collect();
    let free: Vec<f64> = g
        .iter()
        .zip(&active)
        .filter(|(_, a)| !**a)
        .map(|(v, _)| *v)
        .collect();
    let nu = if free.is_empty() {
        g.iter().cloned().fold(f64::INFINITY, f64::min)
    } else {
        free.iter().sum::<f64>() / free.len() as f64
    };
    let mut report = KktReport {
        budget_multiplier: nu,
        stationarity: 0.0,
        dual_infeasibility: 0.0,
        primal_infeasibility: (w.iter().sum::<f64>() - 1.0).abs(),
        complementarity: 0.0,
    };
    for i in 0..w.len() {
        report.primal_infeasibility = report.primal_infeasibility.max(lower - w[i]);
        if active[i] {
            let lambda = g[i] - nu;
            report.dual_infeasibility = report.dual_infeasibility.max(-lambda);
            report.complementarity = report.complementarity.max((lambda * (w[i] - lower)).abs());
        } else {
            report.stationarity = report.stationarity.max((g[i] - nu).abs());
        }
    }
    report
}

#[derive(Debug, Clone, PartialEq)]
pub struct QpSolution {
    pub weights: Vec<f64>,
    pub iterations: usize,
    pub kkt: KktReport,
}

pub const KKT_TOLERANCE: f64 = 1e-8;
const RIDGE: f64 = 1e-12;

/// Active-set solve of `min 1/2 w'Hw - c'w` s.t. `1'w = 1`, `w >= lower`.
/// `H` must be symmetric positive semidefinite; a ridge of `1e-12` times the
/// largest diagonal entry on the free block selects the minimum-norm optimum
/// along flat directions and keeps the solution invariant to rescaling `H`.
pub fn solve_budget_qp(h: &DMatrix<f64>, c: &[f64], lower: f64) -> Result<QpSolution, OptimError> {
    let n = c.len();
    if h.nrows() != n || h.ncols() != n {
        return Err(OptimError::DimensionMismatch(format!(
            "{}x{} matrix for {} assets",
            h.nrows(),
            h.ncols(),
            n
        )));
    }
    if n == 0 {
        return Err(OptimError::DimensionMismatch("no assets".into()));
    }
    let eq = 1.0 / n as f64;
    if lower > eq {
        return Err(OptimError::Infeasible {
            lower_bound: lower,
            n_assets: n,
        });
    }
    if !lower.is_finite() {
        return Err(OptimError::InvalidSpec(format!("lower bound {lower}")));
    }
    if !(h.iter().all(|v| v.is_finite()) && c.iter().all(|v| v.is_finite())) {
        return Err(OptimError::SolverFailure("non-finite problem data".into()));
    }

    let mut w = vec![eq; n];
    let mut active = vec![false; n];
    if lower == eq {
        active.iter_mut().for_each(|a| *a = true);
    }
    let scale = h.amax().max(c.iter().fold(0.0f64, |m, v| m.max(v.abs()))).max(1e-300);
    let lambda_tol = 1e-13 * scale;

    let max_iter = 50 * n + 100;
    let mut iterations = 0;
    loop {
        iterations += 1;
        if iterations > max_iter {
            return Err(OptimError::SolverFailure(format!(
                "active set did not settle in {max_iter} iterations"
            )));
        }
        let target = equality_qp(h, c, lower, &active)?;
        let blocking = (0..n)
            .filter(|&i| !active[i] && target[i] < lower)
            .map(|i| {
                let denom = w[i] - target[i];
                let alpha = if denom > 0.0 { (w[i] - lower) / denom } else { 0.0 };
                (alpha.max(0.0), i)
            })
            .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));

        match blocking {
            Some((alpha, idx)) => {
                for i in 0..n {
                    if !active[i] {
                        w[i] += alpha * (target[i] - w[i]);
                    }
                }
                w[idx] = lower;
                active[idx] = true;
            }
            None => {
                w = target;
                let wv = DVector::from_column_slice(&w);
                let g: Vec<f64> = (h * &wv).iter().zip(c).map(|(a, b)| a - b).collect();
                let free: Vec<usize> = (0..n).filter(|&i| !active[i]).collect();
                let nu = if free.is_empty() {
                    // Only possible when lower == 1/N: the point is fixed.
                    break;
                } else {
                    free.iter().map(|&i| g[i]).sum::<f64>() / free.len() as f64
                };
                let worst = (0..n)
                    .filter(|&i| active[i])
                    .map(|i| (g[i] - nu, i))
                    .min_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                match worst {
                    Some((lambda, i)) if lambda < -lambda_tol => active[i] = false,
                    _ => break,
                }
            }
        }
    }

    let kkt = kkt_report(h, c, lower, &w);
    if kkt.max_residual() > KKT_TOLERANCE {
        return Err(OptimError::KktViolation {
            residual: kkt.max_residual(),
        });
    }
    Ok(QpSolution {
        weights: w,
        iterations,
        kkt,
    })
}

/// Minimizer with the active weights pinned at `lower` and the budget
/// constraint enforced on the free block.
fn equality_qp(h: &DMatrix<f64>, c: &[f64], lower: f64, active: &[bool]) -> Result<Vec<f64>, OptimError> {
    let n = c.len();
    let free: Vec<usize> = (0..n).filter(|&i| !active[i]).collect();
    let mut w = vec![lower; n];
    let k = free.len();
    if k == 0 {
        return Ok(w);
    }
    let n_active = (n - k) as f64;
    let top = (0..n).map(|i| h[(i, i)]).fold(0.0f64, f64::max);
    let ridge = if top > 0.0 { RIDGE * top } else { RIDGE };
    let mut kkt = DMatrix::zeros(k + 1, k + 1);
    let mut rhs = DVector::zeros(k + 1);
    for (a, &i) in free.iter().enumerate() {
        for (b, &j) in free.iter().enumerate() {
            kkt[(a, b)] = h[(i, j)];
        }
        kkt[(a, a)] += ridge;
        kkt[(a, k)] = 1.0;
        kkt[(k, a)] = 1.0;
        let fixed: f64 = (0..n).filter(|&j| active[j]).map(|j| h[(i, j)] * lower).sum();
        rhs[a] = c[i] - fixed;
    }
    rhs[k] = 1.0 - n_active * lower;
    let sol = kkt
        .lu()
        .solve(&rhs)
        .ok_or_else(|| OptimError::SolverFailure("singular KKT system".into()))?;
    for (a, &i) in free.iter().enumerate() {
        w[i] = sol[a];
    }
    if w.iter().any(|v| !v.is_finite()) {
        return Err(OptimError::SolverFailure("non-finite KKT solution".into()));
    }
    Ok(w)
}

fn check_dims(n: usize, sigma: &DMatrix<f64>) -> Result<(), OptimError> {
    if sigma.nrows() != n || sigma.ncols() != n {
        return Err(OptimError::DimensionMismatch(format!(
            "covariance is {}x{}, expected {n}x{n}",
            sigma.nrows(),
            sigma.ncols()
        )));
    }
    Ok(())
}

/// Maximizes `w'mu - gamma/2 w'Sigma w` for MVS/MVSC. Inputs are expected in
/// decimal return units.
pub fn solve_mv(mu: &[f64], sigma: &DMatrix<f64>, spec: &StrategySpec) -> Result<WeightVector, OptimError> {
    if !matches!(spec.kind, StrategyKind::MVS | StrategyKind::MVSC) {
        return Err(OptimError::WrongKind(spec.kind));
    }
    check_dims(mu.len(), sigma)?;
    spec.validate(mu.len())?;
    let h = sigma * spec.gamma;
    Ok(WeightVector(solve_budget_qp(&h, mu, spec.lower_bound)?.weights))
}

/// Minimizes `w'Sigma w` for MIN/MINC.
pub fn solve_minvar(sigma: &DMatrix<f64>, spec: &StrategySpec) -> Result<WeightVector, OptimError> {
    if !matches!(spec.kind, StrategyKind::MIN | StrategyKind::MINC) {
        return Err(OptimError::WrongKind(spec.kind));
    }
    let n = sigma.nrows();
    check_dims(n, sigma)?;
    spec.validate(n)?;
    let zeros = vec![0.0; n];
    Ok(WeightVector(solve_budget_qp(sigma, &zeros, spec.lower_bound)?.weights))
}

/// 1/2 w'Hw - c'w.
pub fn qp_objective(h: &DMatrix<f64>, c: &[f64], w: &[f64]) -> f64 {
    let wv = DVector::from_column_slice(w);
    0.5 * wv.dot(&(h * &wv)) - c.iter().zip(w).map(|(a, b)| a * b).sum::<f64>()
}
