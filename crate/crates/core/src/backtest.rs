//! Rolling-window out-of-sample backtest.
//!
//! For each month `t` after the first `M`, the previous `M` months give the
//! mean vector and either the sample covariance or a local covariance at a
//! grid point computed from information through `t - 1`. Target weights are
//! solved, the month's gross return is realized, holdings drift with
//! returns, and the next rebalance trades from the drifted weights back to
//! the new target. Trading costs are proportional to turnover.

use log::warn;
use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lgc::LocalParams;
use crate::local_cov::{self, CovError, LocalCovEstimator, LocalCovMatrix};
use crate::optimizer::{self, OptimError, StrategyKind, StrategySpec};
use crate::panel::{ReturnPanel, YearMonth};
use crate::stats;

#[derive(Debug, Error, PartialEq)]
pub enum BacktestError {
    #[error("panel has {rows} rows; window {window} needs more than {}", window + 1)]
    TooShort { rows: usize, window: usize },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("portfolio value wiped out ({context}, return {return_pct:.3}%)")]
    PortfolioWipeout { context: String, return_pct: f64 },
    #[error(transparent)]
    Optim(#[from] OptimError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum GridMethod {
    /// Mean of the last `k` monthly returns of each asset.
    MovingGrid { k: usize },
    /// Per-asset empirical quantile of the estimation window.
    Percentile { q: f64 },
}

impl Default for GridMethod {
    fn default() -> Self {
        GridMethod::MovingGrid { k: 3 }
    }
}

/// How the first out-of-sample allocation is charged.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum InitialAllocation {
    /// The first target is taken without trading cost or turnover.
    #[default]
    Free,
    /// The first target is bought from an all-cash position.
    FromCash,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BacktestConfig {
    pub window: usize,
    pub strategies: Vec<StrategySpec>,
    pub tcost_bp: f64,
    pub grid: GridMethod,
    pub estimator: LocalCovEstimator,
    pub initial_allocation: InitialAllocation,
    /// Start each month's pairwise fits from the previous month's estimates.
    pub warm_start: bool,
}

impl BacktestConfig {
    pub fn new(window: usize, strategies: Vec<StrategySpec>) -> Self {
        Self {
            window,
            strategies,
            tcost_bp: 1.0,
            grid: GridMethod::default(),
            estimator: LocalCovEstimator::default(),
            initial_allocation: InitialAllocation::default(),
            warm_start: true,
        }
    }

    pub fn bandwidth_constant(mut self, c: f64) -> Self {
        self.estimator.bandwidth_constant = c;
        self
    }

    fn validate(&self, panel: &ReturnPanel) -> Result<(), BacktestError> {
        let rows = panel.n_rows();
        if self.window < 2 || rows <= self.window + 1 {
            return Err(BacktestError::TooShort {
                rows,
                window: self.window,
            });
        }
        if self.strategies.is_empty() {
            return Err(BacktestError::InvalidConfig("no strategies".into()));
        }
        if !(self.tcost_bp >= 0.0 && self.tcost_bp.is_finite()) {
            return Err(BacktestError::InvalidConfig(format!(
                "transaction cost {} bp",
                self.tcost_bp
            )));
        }
        if !(self.estimator.bandwidth_constant > 0.0) {
            return Err(BacktestError::InvalidConfig("bandwidth constant must be positive".into()));
        }
        match self.grid {
            GridMethod::MovingGrid { k } if k == 0 || k > self.window => {
                return Err(BacktestError::InvalidConfig(format!(
                    "moving grid lookback {k} must lie in 1..={}",
                    self.window
                )))
            }
            GridMethod::Percentile { q } if !(q > 0.0 && q < 1.0) => {
                return Err(BacktestError::InvalidConfig(format!("grid quantile {q}")))
            }
            _ => {}
        }
        for s in &self.strategies {
            s.validate(panel.n_assets())?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FallbackEvent {
    pub period: usize,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyPath {
    pub spec: StrategySpec,
    pub name: String,
    /// One row per out-of-sample month.
    pub target_weights: Vec<Vec<f64>>,
    /// Holdings just before each rebalance.
    pub drifted_weights: Vec<Vec<f64>>,
    pub gross_returns: Vec<f64>,
    pub net_returns: Vec<f64>,
    pub turnover: Vec<f64>,
    pub wealth_gross: Vec<f64>,
    pub wealth_net: Vec<f64>,
    pub fallbacks: Vec<FallbackEvent>,
}

impl StrategyPath {
    pub fn average_turnover(&self) -> f64 {
        stats::mean(&self.turnover)
    }

    /// Net returns under a different cost level.
    pub fn net_returns_at(&self, tcost_bp: f64) -> Vec<f64> {
        self.gross_returns
            .iter()
            .zip(&self.turnover)
            .map(|(g, to)| apply_transaction_costs(*g, *to, tcost_bp))
            .collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct PeriodDiagnostics {
    pub period: usize,
    pub date: Option<YearMonth>,
    pub grid: Option<Vec<f64>>,
    pub global_pd_repaired: bool,
    pub local_pd_repaired: bool,
    pub lgc_fallbacks: usize,
    pub estimation_error: Option<String>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BacktestResult {
    pub window: usize,
    /// Dates of the out-of-sample months, when the panel carries dates.
    pub dates: Option<Vec<YearMonth>>,
    pub strategies: Vec<StrategyPath>,
    pub diagnostics: Vec<PeriodDiagnostics>,
}

impl BacktestResult {
    pub fn strategy(&self, name: &str) -> Option<&StrategyPath> {
        self.strategies.iter().find(|s| s.name == name)
    }
}

/// Self-financing drift: `w_j (1 + r_j/100) / sum_k w_k (1 + r_k/100)`.
pub fn drifted_weights(prev_target: &[f64], realized_pct: &[f64]) -> Result<Vec<f64>, BacktestError> {
    let grown: Vec<f64> = prev_target
        .iter()
        .zip(realized_pct)
        .map(|(w, r)| w * (1.0 + r / 100.0))
        .collect();
    let total: f64 = grown.iter().sum();
    if !(total > 0.0) {
        return Err(BacktestError::PortfolioWipeout {
            context: "weight drift".into(),
            return_pct: 100.0 * (total - 1.0),
        });
    }
    Ok(grown.into_iter().map(|g| g / total).collect())
}

/// `sum_j |next_j - drifted_j|`.
pub fn turnover(target_next: &[f64], drifted: &[f64]) -> f64 {
    target_next
        .iter()
        .zip(drifted)
        .map(|(a, b)| (a - b).abs())
        .sum()
}

/// Mean over dates of the population standard deviation of the weights,
/// in percent.
pub fn weight_dispersion(path: &[Vec<f64>]) -> f64 {
    let per_date: Vec<f64> = path
        .iter()
        .map(|w| {
            let m = stats::mean(w);
            (w.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / w.len() as f64).sqrt()
        })
        .collect();
    100.0 * stats::mean(&per_date)
}

/// Net percent return: each unit of turnover costs `tcost_bp` basis points,
/// i.e. `turnover * tcost_bp * 0.01` percent.
pub fn apply_transaction_costs(gross_return_pct: f64, turnover_t: f64, tcost_bp: f64) -> f64 {
    gross_return_pct - turnover_t * tcost_bp * 0.01
}

/// Largest positive and most negative `target - drifted` over all dates and
/// assets, in percent.
pub fn max_adjustments(target: &[Vec<f64>], drifted: &[Vec<f64>]) -> (f64, f64) {
    let mut hi = 0.0f64;
    let mut lo = 0.0f64;
    for (t, d) in target.iter().zip(drifted) {
        for (a, b) in t.iter().zip(d) {
            let diff = a - b;
            hi = hi.max(diff);
            lo = lo.min(diff);
        }
    }
    (100.0 * hi, 100.0 * lo)
}

/// Wealth path starting at 1: `W_{k+1} = W_k (1 + r_k / 100)`.
pub fn wealth_path(returns_pct: &[f64]) -> Vec<f64> {
    let mut w = Vec::with_capacity(returns_pct.len() + 1);
    let mut cur = 1.0;
    w.push(cur);
    for r in returns_pct {
        cur *= 1.0 + r / 100.0;
        w.push(cur);
    }
    w
}

fn scaled(m: &DMatrix<f64>, factor: f64) -> DMatrix<f64> {
    m * factor
}

struct Estimates {
    mu: Vec<f64>,
    global: Option<Result<LocalCovMatrix, CovError>>,
    local: Option<Result<LocalCovMatrix, CovError>>,
}

struct StrategyState {
    path: StrategyPath,
    last_target: Option<Vec<f64>>,
    holdings: Option<Vec<f64>>,
    wealth_gross: f64,
    wealth_net: f64,
}

pub fn run_backtest(panel: &ReturnPanel, config: &BacktestConfig) -> Result<BacktestResult, BacktestError> {
    config.validate(panel)?;
    let m = config.window;
    let n_periods = panel.n_rows() - m;
    let n_assets = panel.n_assets();
    let need_global = config
        .strategies
        .iter()
        .any(|s| s.kind != StrategyKind::EW && !s.uses_local());
    let need_local = config.strategies.iter().any(|s| s.uses_local());

    let mut states: Vec<StrategyState> = config
        .strategies
        .iter()
        .map(|spec| StrategyState {
            path: StrategyPath {
                spec: *spec,
                name: spec.name(),
                target_weights: Vec::with_capacity(n_periods),
                drifted_weights: Vec::with_capacity(n_periods),
                gross_returns: Vec::with_capacity(n_periods),
                net_returns: Vec::with_capacity(n_periods),
                turnover: Vec::with_capacity(n_periods),
                wealth_gross: vec![1.0],
                wealth_net: vec![1.0],
                fallbacks: Vec::new(),
            },
            last_target: None,
            holdings: None,
            wealth_gross: 1.0,
            wealth_net: 1.0,
        })
        .collect();

    let mut diagnostics = Vec::with_capacity(n_periods);
    let mut warm: Option<Vec<LocalParams>> = None;

    for period in 0..n_periods {
        let t = m + period;
        let window = panel
            .rows(t - m, t)
            .map_err(|e| BacktestError::InvalidConfig(e.to_string()))?;
        let mut diag = PeriodDiagnostics {
            period,
            date: panel.dates().map(|d| d[t]),
            ..Default::default()
        };

        let mu: Vec<f64> = window.means().iter().map(|v| v / 100.0).collect();
        let global = need_global.then(|| local_cov::global_covariance(&window));
        let local = need_local.then(|| {
            let grid = match config.grid {
                GridMethod::MovingGrid { k } => local_cov::moving_grid(panel, t, k),
                GridMethod::Percentile { q } => local_cov::percentile_grid(&window, q),
            }?;
            diag.grid = Some(grid.0.clone());
            let w = if config.warm_start { warm.as_deref() } else { None };
            config.estimator.estimate(&window, &grid, w)
        });
        if let Some(Ok(g)) = &global {
            diag.global_pd_repaired = g.pd_repaired;
        }
        match &local {
            Some(Ok(l)) => {
                diag.local_pd_repaired = l.pd_repaired;
                diag.lgc_fallbacks = l.n_fallbacks();
                if !l.pair_fits.is_empty() {
                    warm = Some(l.pair_params());
                }
            }
            Some(Err(e)) => diag.estimation_error = Some(e.to_string()),
            None => {}
        }
        if let Some(Err(e)) = &global {
            diag.estimation_error = Some(e.to_string());
        }
        let estimates = Estimates { mu, global, local };
        let realized = panel.row(t);

        for state in states.iter_mut() {
            step_strategy(state, &estimates, &realized, period, n_assets, config)?;
        }
        diagnostics.push(diag);
    }

    let dates = panel.dates().map(|d| d[m..].to_vec());
    Ok(BacktestResult {
        window: m,
        dates,
        strategies: states.into_iter().map(|s| s.path).collect(),
        diagnostics,
    })
}

fn target_weights(spec: &StrategySpec, est: &Estimates) -> Result<Vec<f64>, String> {
    let source = if spec.uses_local() { &est.local } else { &est.global };
    let cov = match source {
        Some(Ok(c)) => c,
        Some(Err(e)) => return Err(format!("covariance estimation failed: {e}")),
        None => return Err("covariance not estimated".into()),
    };
    let sigma = scaled(&cov.matrix, 1e-4);
    let w = match spec.kind {
        StrategyKind::MVS | StrategyKind::MVSC => optimizer::solve_mv(&est.mu, &sigma, spec),
        StrategyKind::MIN | StrategyKind::MINC => optimizer::solve_minvar(&sigma, spec),
        StrategyKind::EW => unreachable!("EW has no optimization step"),
    };
    w.map(|w| w.0).map_err(|e| format!("optimization failed: {e}"))
}

fn step_strategy(
    state: &mut StrategyState,
    est: &Estimates,
    realized: &[f64],
    period: usize,
    n_assets: usize,
    config: &BacktestConfig,
) -> Result<(), BacktestError> {
    let spec = state.path.spec;
    let target = match (spec.kind, &state.holdings) {
        (StrategyKind::EW, None) => optimizer::equal_weights(n_assets).0,
        (StrategyKind::EW, Some(h)) => h.clone(),
        _ => match target_weights(&spec, est) {
            Ok(w) => w,
            Err(reason) => {
                let fallback = state
                    .last_target
                    .clone()
                    .unwrap_or_else(|| optimizer::equal_weights(n_assets).0);
                warn!("{} period {period}: {reason}; keeping previous target", state.path.name);
                state.path.fallbacks.push(FallbackEvent { period, reason });
                fallback
            }
        },
    };
    let pre_trade = match (&state.holdings, config.initial_allocation) {
        (Some(h), _) => h.clone(),
        (None, InitialAllocation::Free) => target.clone(),
        (None, InitialAllocation::FromCash) => vec![0.0; n_assets],
    };
    let to = turnover(&target, &pre_trade);
    let gross: f64 = target.iter().zip(realized).map(|(w, r)| w * r).sum();
    let net = apply_transaction_costs(gross, to, config.tcost_bp);
    if !(gross > -100.0 && net > -100.0) {
        return Err(BacktestError::PortfolioWipeout {
            context: format!("{} at out-of-sample month {period}", state.path.name),
            return_pct: gross.min(net),
        });
    }
    let drifted = drifted_weights(&target, realized)?;

    state.wealth_gross *= 1.0 + gross / 100.0;
    state.wealth_net *= 1.0 + net / 100.0;
    let p = &mut state.path;
    p.drifted_weights.push(pre_trade);
    p.target_weights.push(target.clone());
    p.gross_returns.push(gross);
    p.net_returns.push(net);
    p.turnover.push(to);
    p.wealth_gross.push(state.wealth_gross);
    p.wealth_net.push(state.wealth_net);
    state.last_target = Some(target);
    state.holdings = Some(drifted);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn drift_hand_example() {
        let d = drifted_weights(&[0.5, 0.5], &[100.0, 0.0]).unwrap();
        assert!((d[0] - 2.0 / 3.0).abs() < 1e-15 && (d[1] - 1.0 / 3.0).abs() < 1e-15);
        let same = drifted_weights(&[0.25; 4], &[3.0; 4]).unwrap();
        assert_eq!(same, vec![0.25; 4]);
        assert!(drifted_weights(&[1.5, -0.5], &[-100.0, 50.0]).is_err());
    }

    #[test]
    fn turnover_and_costs() {
        assert_eq!(turnover(&[0.3, 0.7], &[0.3, 0.7]), 0.0);
        assert_eq!(turnover(&[0.0, 1.0], &[1.0, 0.0]), 2.0);
        assert_eq!(apply_transaction_costs(1.0, 0.0, 1.0), 1.0);
        assert!((apply_transaction_costs(1.0, 2.0, 1.0) - 0.98).abs() < 1e-15);
    }

    #[test]
    fn dispersion_and_adjustments() {
        assert_eq!(weight_dispersion(&[vec![0.25; 4], vec![0.25; 4]]), 0.0);
        assert!((weight_dispersion(&[vec![1.0, 0.0]]) - 50.0).abs() < 1e-12);
        assert_eq!(max_adjustments(&[vec![0.5, 0.5]], &[vec![0.5, 0.5]]), (0.0, 0.0));
        assert_eq!(max_adjustments(&[vec![0.0, 1.0]], &[vec![1.0, 0.0]]), (100.0, -100.0));
    }

    #[test]
    fn wealth_recursion() {
        let w = wealth_path(&[10.0, -50.0]);
        assert_eq!(w, vec![1.0, 1.1, 0.55]);
    }
}
