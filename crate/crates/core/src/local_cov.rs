//! Local and global covariance matrices for a return panel.
//!
//! A local covariance matrix at a grid point `x` is assembled from bivariate
//! local Gaussian fits: pair `(i, j)` is fitted at `(x_i, x_j)` with the
//! plug-in bandwidth of that pair, the off-diagonal entry is
//! `rho_ij * sigma_i(ij) * sigma_j(ij)`, and asset `i`'s variance is built
//! from the `N - 1` local standard deviations `sigma_i(ij)` it receives (see
//! [`DiagonalRule`]). The pairwise assembly need not be positive definite, so
//! every matrix is finalized by [`nearest_pd`].

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::lgc::{
    self, BivariateSample, FitDiagnostics, FitOptions, GridPoint2D, LgcError, LocalParams,
};
use crate::panel::ReturnPanel;
use crate::parallel::Execution;
use crate::stats;

#[derive(Debug, Error, PartialEq)]
pub enum CovError {
    #[error("degenerate sample: asset {asset} has zero variance")]
    DegenerateSample { asset: usize },
    #[error("grid has {actual} coordinates, panel has {expected} assets")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("time index {t} needs {k} prior rows within {rows} rows")]
    IndexOutOfRange { t: usize, k: usize, rows: usize },
    #[error("insufficient data: {0}")]
    InsufficientData(String),
    #[error("quantile level {0} outside (0, 1)")]
    InvalidQuantile(f64),
    #[error("matrix is not symmetric (max asymmetry {0:.3e})")]
    NonSymmetric(f64),
    #[error("matrix is not square ({rows}x{cols})")]
    NotSquare { rows: usize, cols: usize },
    #[error("non-positive diagonal entry {value} at {index}")]
    NonPositiveDiagonal { index: usize, value: f64 },
    #[error(transparent)]
    Lgc(#[from] LgcError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GridPointN(pub Vec<f64>);

impl GridPointN {
    pub fn coordinates(&self) -> &[f64] {
        &self.0
    }
}

/// How asset `i`'s local standard deviation is formed from its pairwise fits.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum DiagonalRule {
    /// Arithmetic mean of `sigma_i` over the pairs containing `i`.
    #[default]
    MeanPairSigma,
    MedianPairSigma,
}

impl DiagonalRule {
    fn describe(self) -> &'static str {
        match self {
            DiagonalRule::MeanPairSigma => "square of mean pairwise local sigma",
            DiagonalRule::MedianPairSigma => "square of median pairwise local sigma",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FallbackReason {
    InsufficientLocalData,
    NonConvergence,
}

/// Outcome of one bivariate fit inside a local covariance matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairFit {
    pub i: usize,
    pub j: usize,
    pub params: LocalParams,
    /// Present when the local fit succeeded.
    pub diagnostics: Option<FitDiagnostics>,
    /// Set when the pair fell back to its global Gaussian fit.
    pub fallback: Option<FallbackReason>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalCovMatrix {
    pub matrix: DMatrix<f64>,
    pub pd_repaired: bool,
    /// Empty for the global estimator.
    pub pair_fits: Vec<PairFit>,
    pub diag_source: String,
}

impl LocalCovMatrix {
    pub fn n_fallbacks(&self) -> usize {
        self.pair_fits.iter().filter(|p| p.fallback.is_some()).count()
    }

    /// Local parameters in pair order, for warm-starting the next estimate.
    pub fn pair_params(&self) -> Vec<LocalParams> {
        self.pair_fits.iter().map(|p| p.params).collect()
    }

    pub fn correlation(&self) -> DMatrix<f64> {
        to_correlation(&self.matrix)
    }
}

/// Default eigenvalue floor relative to the largest eigenvalue.
pub const DEFAULT_PD_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalCovEstimator {
    pub bandwidth_constant: f64,
    pub diagonal: DiagonalRule,
    pub fit: FitOptions,
    pub pd_tol: f64,
    pub execution: Execution,
}

impl Default for LocalCovEstimator {
    fn default() -> Self {
        Self {
            bandwidth_constant: lgc::DEFAULT_BANDWIDTH_CONSTANT,
            diagonal: DiagonalRule::default(),
            fit: FitOptions::default(),
            pd_tol: DEFAULT_PD_TOL,
            execution: Execution::default(),
        }
    }
}

/// Pairs `(i, j)` with `i < j` in row-major order.
pub fn pair_indices(n_assets: usize) -> Vec<(usize, usize)> {
    (0..n_assets)
        .flat_map(|i| (i + 1..n_assets).map(move |j| (i, j)))
        .collect()
}

impl LocalCovEstimator {
    pub fn with_bandwidth_constant(bandwidth_constant: f64) -> Self {
        Self {
            bandwidth_constant,
            ..Self::default()
        }
    }

    /// Local covariance at `grid`. `warm_start`, when given, holds one
    /// initial value per pair in [`pair_indices`] order.
    pub fn estimate(
        &self,
        panel: &ReturnPanel,
        grid: &GridPointN,
        warm_start: Option<&[LocalParams]>,
    ) -> Result<LocalCovMatrix, CovError> {
        let n_assets = panel.n_assets();
        if grid.0.len() != n_assets {
            return Err(CovError::DimensionMismatch {
                expected: n_assets,
                actual: grid.0.len(),
            });
        }
        for j in 0..n_assets {
            if stats::sample_variance(panel.column(j)) == 0.0 {
                return Err(CovError::DegenerateSample { asset: j });
            }
        }
        if n_assets == 1 {
            let mut cov = global_covariance(panel)?;
            cov.diag_source = "sample variance (single asset)".into();
            return Ok(cov);
        }
        let pairs = pair_indices(n_assets);
        let warm = warm_start.filter(|w| w.len() == pairs.len());

        let fits: Vec<Result<PairFit, CovError>> =
            self.execution.map_range(pairs.len(), |k| {
                let (i, j) = pairs[k];
                self.fit_pair(panel, grid, i, j, warm.map(|w| w[k]))
            });
        let fits = fits.into_iter().collect::<Result<Vec<_>, _>>()?;

        let mut sigmas: Vec<Vec<f64>> = vec![Vec::with_capacity(n_assets - 1); n_assets];
        let mut m = DMatrix::zeros(n_assets, n_assets);
        for fit in &fits {
            let p = &fit.params;
            let c = p.covariance();
            m[(fit.i, fit.j)] = c;
            m[(fit.j, fit.i)] = c;
            sigmas[fit.i].push(p.sigma1);
            sigmas[fit.j].push(p.sigma2);
        }
        for (i, s) in sigmas.iter_mut().enumerate() {
            let sd = match self.diagonal {
                DiagonalRule::MeanPairSigma => stats::mean(s),
                DiagonalRule::MedianPairSigma => stats::quantile(s, 0.5),
            };
            m[(i, i)] = sd * sd;
        }
        let (matrix, pd_repaired) = nearest_pd(&m, self.pd_tol)?;
        Ok(LocalCovMatrix {
            matrix,
            pd_repaired,
            pair_fits: fits,
            diag_source: self.diagonal.describe().into(),
        })
    }

    fn fit_pair(
        &self,
        panel: &ReturnPanel,
        grid: &GridPointN,
        i: usize,
        j: usize,
        init: Option<LocalParams>,
    ) -> Result<PairFit, CovError> {
        let sample = BivariateSample::new(panel.column(i).to_vec(), panel.column(j).to_vec())?;
        let b = lgc::plugin_bandwidth(&sample, self.bandwidth_constant)?;
        let r = GridPoint2D::new(grid.0[i], grid.0[j]);
        let fallback = |reason| -> Result<PairFit, CovError> {
            Ok(PairFit {
                i,
                j,
                params: lgc::global_mle(&sample)?,
                diagnostics: None,
                fallback: Some(reason),
            })
        };
        match lgc::estimate_local_params_with(&sample, r, b, init, &self.fit) {
            Ok((params, diag)) => Ok(PairFit {
                i,
                j,
                params,
                diagnostics: Some(diag),
                fallback: None,
            }),
            Err(LgcError::InsufficientLocalData { .. }) => {
                fallback(FallbackReason::InsufficientLocalData)
            }
            Err(LgcError::NonConvergence { .. }) => fallback(FallbackReason::NonConvergence),
            Err(e) => Err(e.into()),
        }
    }
}

/// Local covariance at `grid` with default settings and the given plug-in
/// bandwidth constant.
pub fn pairwise_local_covariance(
    panel: &ReturnPanel,
    grid: &GridPointN,
    bandwidth_constant: f64,
) -> Result<LocalCovMatrix, CovError> {
    LocalCovEstimator::with_bandwidth_constant(bandwidth_constant).estimate(panel, grid, None)
}

/// Sample covariance (`n - 1` denominator), repaired only when not PD.
pub fn global_covariance(panel: &ReturnPanel) -> Result<LocalCovMatrix, CovError> {
    let n_assets = panel.n_assets();
    let mut m = DMatrix::zeros(n_assets, n_assets);
    for i in 0..n_assets {
        let v = stats::sample_variance(panel.column(i));
        if v == 0.0 {
            return Err(CovError::DegenerateSample { asset: i });
        }
        m[(i, i)] = v;
        for j in i + 1..n_assets {
            let c = stats::sample_covariance(panel.column(i), panel.column(j));
            m[(i, j)] = c;
            m[(j, i)] = c;
        }
    }
    let (matrix, pd_repaired) = nearest_pd(&m, DEFAULT_PD_TOL)?;
    Ok(LocalCovMatrix {
        matrix,
        pd_repaired,
        pair_fits: Vec::new(),
        diag_source: "sample variance".into(),
    })
}

/// Trailing mean of the `k` rows before row `t`: coordinate `i` is the mean
/// of rows `t-1, ..., t-k` of asset `i`. `t` may equal the row count, which
/// gives the grid for the month after the panel ends.
pub fn moving_grid(panel: &ReturnPanel, t: usize, k: usize) -> Result<GridPointN, CovError> {
    if k == 0 || t < k || t > panel.n_rows() {
        return Err(CovError::IndexOutOfRange {
            t,
            k,
            rows: panel.n_rows(),
        });
    }
    Ok(GridPointN(
        panel
            .columns()
            .iter()
            .map(|c| stats::mean(&c[t - k..t]))
            .collect(),
    ))
}

/// Per-asset empirical `q`-quantile of the full panel, using linear
/// interpolation between order statistics (see [`stats::quantile`]).
pub fn percentile_grid(panel: &ReturnPanel, q: f64) -> Result<GridPointN, CovError> {
    if !(q > 0.0 && q < 1.0) {
        return Err(CovError::InvalidQuantile(q));
    }
    let n = panel.n_rows() as f64;
    if n * q.min(1.0 - q) < 1.0 - 1e-9 {
        return Err(CovError::InsufficientData(format!(
            "{} rows leave no observation beyond the {q} quantile",
            panel.n_rows()
        )));
    }
    Ok(GridPointN(
        panel
            .columns()
            .iter()
            .map(|c| stats::quantile(c, q))
            .collect(),
    ))
}

fn check_symmetric(m: &DMatrix<f64>) -> Result<(), CovError> {
    if !m.is_square() {
        return Err(CovError::NotSquare {
            rows: m.nrows(),
            cols: m.ncols(),
        });
    }
    let scale = m.amax().max(f64::MIN_POSITIVE);
    let asym = (m - m.transpose()).amax();
    if asym > 1e-12 * scale {
        return Err(CovError::NonSymmetric(asym));
    }
    Ok(())
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn to_correlation(m: &DMatrix<f64>) -> DMatrix<f64> {
    let d: Vec<f64> = (0..m.nrows()).map(|i| m[(i, i)].sqrt()).collect();
    DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| {
        if i == j {
            1.0
        } else {
            m[(i, j)] / (d[i] * d[j])
        }
    })
}

/// Projection onto the PSD cone (negative eigenvalues set to zero).
fn project_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let clipped = eig.eigenvalues.map(|l| l.max(0.0));
    symmetrize(&(&eig.eigenvectors * DMatrix::from_diagonal(&clipped) * eig.eigenvectors.transpose()))
}

fn eigen_extremes(m: &DMatrix<f64>) -> (f64, f64) {
    let eig = SymmetricEigen::new(m.clone());
    (eig.eigenvalues.min(), eig.eigenvalues.max())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HighamOptions {
    pub max_iterations: usize,
    /// Stop once successive iterates differ by less than this in Frobenius norm.
    pub tolerance: f64,
}

impl Default for HighamOptions {
    fn default() -> Self {
        Self {
            max_iterations: 100,
            tolerance: 1e-9,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NearestCorrelation {
    pub matrix: DMatrix<f64>,
    pub iterations: usize,
    pub converged: bool,
}

/// Nearest correlation matrix in Frobenius norm by alternating projections
/// with Dykstra's correction: project onto the PSD cone, then onto the set of
/// unit-diagonal symmetric matrices. The final iterate is clipped onto the
/// cone once more and rescaled to unit diagonal, so the result is exactly a
/// correlation matrix even when the iteration cap is hit.
pub fn nearest_correlation(
    c: &DMatrix<f64>,
    opts: &HighamOptions,
) -> Result<NearestCorrelation, CovError> {
    check_symmetric(c)?;
    let n = c.nrows();
    let mut y = symmetrize(c);
    let mut correction = DMatrix::zeros(n, n);
    let mut iterations = 0;
    let mut converged = false;
    while iterations < opts.max_iterations {
        iterations += 1;
        let r = &y - &correction;
        let x = project_psd(&r);
        correction = &x - &r;
        let mut next = x;
        for i in 0..n {
            next[(i, i)] = 1.0;
        }
        let change = (&next - &y).norm();
        y = next;
        if change < opts.tolerance {
            converged = true;
            break;
        }
    }
    let psd = project_psd(&y);
    Ok(NearestCorrelation {
        matrix: to_correlation(&psd),
        iterations,
        converged,
    })
}

/// Returns `m` unchanged when its smallest eigenvalue is at least
/// `tol * largest`. Otherwise converts to correlation form, applies
/// [`nearest_correlation`], rescales by the original standard deviations and
/// raises every eigenvalue to at least `tol * largest`.
pub fn nearest_pd(m: &DMatrix<f64>, tol: f64) -> Result<(DMatrix<f64>, bool), CovError> {
    check_symmetric(m)?;
    let (lo, hi) = eigen_extremes(m);
    if hi > 0.0 && lo >= tol * hi {
        return Ok((m.clone(), false));
    }
    let n = m.nrows();
    let sd: Vec<f64> = (0..n)
        .map(|i| {
            let v = m[(i, i)];
            if v > 0.0 && v.is_finite() {
                Ok(v.sqrt())
            } else {
                Err(CovError::NonPositiveDiagonal { index: i, value: v })
            }
        })
        .collect::<Result<_, _>>()?;
    let corr = to_correlation(&symmetrize(m));
    let nearest = nearest_correlation(&corr, &HighamOptions::default())?.matrix;
    let rescaled = DMatrix::from_fn(n, n, |i, j| nearest[(i, j)] * sd[i] * sd[j]);

    let eig = SymmetricEigen::new(rescaled);
    let top = eig.eigenvalues.max();
    // Small headroom so the floor survives the reconstruction round-off.
    let floor = tol * top * (1.0 + 1e-3);
    let lifted = eig.eigenvalues.map(|l| l.max(floor));
    let out = symmetrize(&(&eig.eigenvectors * DMatrix::from_diagonal(&lifted) * eig.eigenvectors.transpose()));
    Ok((out, true))
}
