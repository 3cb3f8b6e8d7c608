//! Synthetic monthly return panels for desk-scale experiments.
//!
//! Marginal scales follow a six-asset mix of two equity indices, two
//! government bond indices, a commodity index and gold (monthly means of
//! roughly 0.1-0.8%, standard deviations of 2-5%).

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp1, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use crate::local_cov::{nearest_pd, DEFAULT_PD_TOL};
use crate::panel::{ReturnPanel, YearMonth};

pub const ASSET_NAMES: [&str; 6] = ["UKEQ", "USEQ", "UKBOND", "USBOND", "CMDTY", "GOLD"];
pub const ASSET_MEANS: [f64; 6] = [0.628, 0.704, 0.769, 0.583, 0.079, 0.177];
pub const ASSET_SDS: [f64; 6] = [4.588, 4.406, 2.376, 2.417, 3.511, 5.211];

/// Lower triangle of the calm-market correlation matrix.
const BASE_CORR: [[f64; 6]; 6] = [
    [1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.760, 1.0, 0.0, 0.0, 0.0, 0.0],
    [0.184, 0.017, 1.0, 0.0, 0.0, 0.0],
    [-0.067, -0.029, 0.489, 1.0, 0.0, 0.0],
    [0.246, 0.288, -0.094, -0.185, 1.0, 0.0],
    [0.038, 0.031, 0.080, 0.077, 0.483, 1.0],
];

/// Lower triangle of the stressed-market correlation matrix: equities move
/// together, gold decouples from equities.
const BEAR_CORR: [[f64; 6]; 6] = [
    [1.0, 0.0, 0.0, 0.0, 0.0, 0.0],
    [0.900, 1.0, 0.0, 0.0, 0.0, 0.0],
    [0.174, -0.017, 1.0, 0.0, 0.0, 0.0],
    [0.020, 0.034, 0.635, 1.0, 0.0, 0.0],
    [0.161, 0.185, -0.140, -0.224, 1.0, 0.0],
    [-0.235, -0.231, 0.204, 0.215, 0.480, 1.0],
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SynthModel {
    /// Multivariate normal with every pairwise correlation equal to `rho`.
    Gaussian { rho: f64 },
    /// Two-state Markov chain between a calm and a high-correlation bear
    /// regime with Gaussian returns in each.
    RegimeSwitching {
        p_enter_bear: f64,
        p_leave_bear: f64,
    },
    /// Exchangeable Clayton copula (lower-tail dependence) with normal
    /// margins.
    Clayton { theta: f64 },
}

impl Default for SynthModel {
    fn default() -> Self {
        SynthModel::RegimeSwitching {
            p_enter_bear: 0.05,
            p_leave_bear: 0.2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub model: SynthModel,
    pub months: usize,
    pub seed: u64,
    pub start: YearMonth,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            model: SynthModel::default(),
            months: 463,
            seed: 1,
            start: YearMonth { year: 1985, month: 1 },
        }
    }
}

fn full_corr(lower: &[[f64; 6]; 6]) -> DMatrix<f64> {
    DMatrix::from_fn(6, 6, |i, j| if i >= j { lower[i][j] } else { lower[j][i] })
}

fn cholesky_of_corr(c: DMatrix<f64>) -> DMatrix<f64> {
    let (pd, _) = nearest_pd(&c, DEFAULT_PD_TOL).expect("symmetric correlation matrix");
    pd.cholesky().expect("positive definite after repair").l()
}

fn correlated_normals(rng: &mut ChaCha8Rng, chol: &DMatrix<f64>) -> DVector<f64> {
    let z = DVector::from_fn(chol.nrows(), |_, _| StandardNormal.sample(rng));
    chol * z
}

fn standard_normal_quantile(u: f64) -> f64 {
    let u = u.clamp(1e-16, 1.0 - 1e-16);
    Normal::standard().inverse_cdf(u)
}

/// One draw from an `dim`-dimensional exchangeable Clayton copula via the
/// Marshall-Olkin frailty construction.
fn clayton_uniforms(rng: &mut ChaCha8Rng, dim: usize, theta: f64) -> Vec<f64> {
    let frailty: f64 = Gamma::new(1.0 / theta, 1.0)
        .expect("positive shape")
        .sample(rng);
    (0..dim)
        .map(|_| {
            let e: f64 = Exp1.sample(rng);
            (1.0 + e / frailty).powf(-1.0 / theta)
        })
        .collect()
}

/// Bivariate sample with standard normal margins and a Clayton copula.
pub fn clayton_pair(n: usize, theta: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let u = clayton_uniforms(&mut rng, 2, theta);
            (standard_normal_quantile(u[0]), standard_normal_quantile(u[1]))
        })
        .unzip()
}

/// Bivariate standard normal sample with correlation `rho`.
pub fn gaussian_pair(n: usize, rho: f64, seed: u64) -> (Vec<f64>, Vec<f64>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = (1.0 - rho * rho).sqrt();
    (0..n)
        .map(|_| {
            let a: f64 = StandardNormal.sample(&mut rng);
            let b: f64 = StandardNormal.sample(&mut rng);
            (a, rho * a + s * b)
        })
        .unzip()
}

pub fn synth_panel(cfg: &SynthConfig) -> ReturnPanel {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = cfg.months;
    let mut columns = vec![Vec::with_capacity(n); 6];
    match cfg.model {
        SynthModel::Gaussian { rho } => {
            let c = DMatrix::from_fn(6, 6, |i, j| if i == j { 1.0 } else { rho });
            let chol = cholesky_of_corr(c);
            for _ in 0..n {
                let z = correlated_normals(&mut rng, &chol);
                for j in 0..6 {
                    columns[j].push(ASSET_MEANS[j] + ASSET_SDS[j] * z[j]);
                }
            }
        }
        SynthModel::Clayton { theta } => {
            for _ in 0..n {
                let u = clayton_uniforms(&mut rng, 6, theta);
                for j in 0..6 {
                    columns[j].push(ASSET_MEANS[j] + ASSET_SDS[j] * standard_normal_quantile(u[j]));
                }
            }
        }
        SynthModel::RegimeSwitching {
            p_enter_bear,
            p_leave_bear,
        } => {
            let calm = cholesky_of_corr(full_corr(&BASE_CORR));
            let bear = cholesky_of_corr(full_corr(&BEAR_CORR));
            let bear_share = p_enter_bear / (p_enter_bear + p_leave_bear);
            // Bear months: equities and commodities fall, bonds and gold
            // hold up; calm-month means restore the long-run averages.
            let bear_shift = [-2.5, -2.5, 0.4, 0.4, -1.0, 0.8];
            let bear_mean: Vec<f64> = (0..6)
                .map(|j| ASSET_MEANS[j] + bear_shift[j] * ASSET_SDS[j] / 4.0)
                .collect();
            let calm_mean: Vec<f64> = (0..6)
                .map(|j| (ASSET_MEANS[j] - bear_share * bear_mean[j]) / (1.0 - bear_share))
                .collect();
            let mut in_bear = false;
            for _ in 0..n {
                let u: f64 = rng.random();
                in_bear = if in_bear {
                    u >= p_leave_bear
                } else {
                    u < p_enter_bear
                };
                let (chol, mean, vol) = if in_bear {
                    (&bear, &bear_mean, 1.5)
                } else {
                    (&calm, &calm_mean, 0.85)
                };
                let z = correlated_normals(&mut rng, chol);
                for j in 0..6 {
                    columns[j].push(mean[j] + vol * ASSET_SDS[j] * z[j]);
                }
            }
        }
    }
    let start = cfg.start.ordinal();
    let dates = (0..n as i64).map(|i| YearMonth::from_ordinal(start + i)).collect();
    ReturnPanel::with_dates(
        ASSET_NAMES.iter().map(|s| s.to_string()).collect(),
        columns,
        dates,
    )
    .expect("synthetic panel is well formed")
}
