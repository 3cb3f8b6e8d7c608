//! Local Gaussian correlation for a bivariate sample.
//!
//! At a point `r` the density of `(X, Y)` is approximated by a bivariate
//! normal `psi(., theta)` with `theta = (mu1, mu2, sigma1, sigma2, rho)`.
//! The local parameters maximize the kernel-weighted local log likelihood
//!
//! ```text
//! L(theta) = n^-1 sum_i K_b(R_i - r) log psi(R_i, theta) - int K_b(v - r) psi(v, theta) dv
//! ```
//!
//! with `K_b` a product Gaussian kernel with bandwidths `(b1, b2)`. Because
//! the kernel is itself a normal density in `v` centred at `r` with covariance
//! `diag(b1^2, b2^2)`, the penalty integral is a Gaussian convolution and has
//! the closed form `phi2(r; mu, Sigma_theta + diag(b1^2, b2^2))`.
//!
//! The maximizer works on `(mu1, mu2, ln sigma1, ln sigma2, atanh rho)` so the
//! search is unconstrained. Internally the objective is multiplied by
//! `2 pi b1 b2`, which leaves the argmax unchanged and makes the convergence
//! tolerance independent of the bandwidth scale (the rescaled objective tends
//! to the ordinary average log likelihood minus one as `b` grows).

use std::f64::consts::PI;

use nalgebra::{Matrix5, SymmetricEigen, Vector5};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stats;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LgcError {
    #[error("invalid local parameters: {0}")]
    InvalidParams(String),
    #[error("invalid bandwidth ({b1}, {b2}): both components must be positive and finite")]
    InvalidBandwidth { b1: f64, b2: f64 },
    #[error("invalid sample: {0}")]
    InvalidSample(String),
    #[error("degenerate sample: zero variance in coordinate {coordinate}")]
    DegenerateSample { coordinate: usize },
    #[error("insufficient local data: normalized kernel mass {mass:.3e} below floor {floor:.3e}")]
    InsufficientLocalData { mass: f64, floor: f64 },
    #[error("no convergence after {iterations} iterations (gradient sup-norm {gradient_norm:.3e})")]
    NonConvergence {
        iterations: usize,
        gradient_norm: f64,
        last: LocalParams,
    },
}

/// Paired observations `(x_i, y_i)`.
#[derive(Debug, Clone, PartialEq)]
pub struct BivariateSample {
    x: Vec<f64>,
    y: Vec<f64>,
}

impl BivariateSample {
    pub fn new(x: Vec<f64>, y: Vec<f64>) -> Result<Self, LgcError> {
        if x.len() != y.len() {
            return Err(LgcError::InvalidSample(format!(
                "x has {} observations, y has {}",
                x.len(),
                y.len()
            )));
        }
        if x.is_empty() {
            return Err(LgcError::InvalidSample("empty sample".into()));
        }
        if x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(LgcError::InvalidSample("non-finite observation".into()));
        }
        Ok(Self { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }

    pub fn x(&self) -> &[f64] {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    /// Sample with the coordinates exchanged.
    pub fn swapped(&self) -> Self {
        Self {
            x: self.y.clone(),
            y: self.x.clone(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bandwidth {
    b1: f64,
    b2: f64,
}

impl Bandwidth {
    pub fn new(b1: f64, b2: f64) -> Result<Self, LgcError> {
        if b1 > 0.0 && b2 > 0.0 && b1.is_finite() && b2.is_finite() {
            Ok(Self { b1, b2 })
        } else {
            Err(LgcError::InvalidBandwidth { b1, b2 })
        }
    }

    pub fn b1(&self) -> f64 {
        self.b1
    }

    pub fn b2(&self) -> f64 {
        self.b2
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridPoint2D {
    pub r1: f64,
    pub r2: f64,
}

impl GridPoint2D {
    pub fn new(r1: f64, r2: f64) -> Self {
        Self { r1, r2 }
    }
}

/// Parameters of the locally approximating bivariate normal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LocalParams {
    pub mu1: f64,
    pub mu2: f64,
    pub sigma1: f64,
    pub sigma2: f64,
    pub rho: f64,
}

impl LocalParams {
    pub fn new(mu1: f64, mu2: f64, sigma1: f64, sigma2: f64, rho: f64) -> Result<Self, LgcError> {
        let p = Self {
            mu1,
            mu2,
            sigma1,
            sigma2,
            rho,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<(), LgcError> {
        if !(self.mu1.is_finite() && self.mu2.is_finite()) {
            return Err(LgcError::InvalidParams("non-finite mean".into()));
        }
        if !(self.sigma1 > 0.0 && self.sigma2 > 0.0)
            || !self.sigma1.is_finite()
            || !self.sigma2.is_finite()
        {
            return Err(LgcError::InvalidParams(format!(
                "standard deviations must be positive, got ({}, {})",
                self.sigma1, self.sigma2
            )));
        }
        if !(self.rho.abs() < 1.0) {
            return Err(LgcError::InvalidParams(format!(
                "correlation must lie in (-1, 1), got {}",
                self.rho
            )));
        }
        Ok(())
    }

    pub fn as_array(&self) -> [f64; 5] {
        [self.mu1, self.mu2, self.sigma1, self.sigma2, self.rho]
    }

    pub fn covariance(&self) -> f64 {
        self.rho * self.sigma1 * self.sigma2
    }

    fn to_unconstrained(self) -> Vector5<f64> {
        Vector5::new(
            self.mu1,
            self.mu2,
            self.sigma1.ln(),
            self.sigma2.ln(),
            self.rho.atanh(),
        )
    }

    fn from_unconstrained(eta: &Vector5<f64>) -> Self {
        Self {
            mu1: eta[0],
            mu2: eta[1],
            sigma1: eta[2].exp(),
            sigma2: eta[3].exp(),
            rho: eta[4].tanh(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitDiagnostics {
    pub converged: bool,
    pub iterations: usize,
    /// Sup-norm of the gradient of the rescaled objective in the
    /// unconstrained parameterization at the returned point.
    pub gradient_norm: f64,
    /// `sum_i K_b(R_i - r)`.
    pub effective_weight: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FitOptions {
    pub max_iterations: usize,
    pub gradient_tolerance: f64,
    /// Lower bound on `n^-1 sum_i exp(-|u_i|^2 / 2)`, the kernel mass with the
    /// kernel normalized to one at its mode.
    pub weight_floor: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        Self {
            max_iterations: 200,
            gradient_tolerance: 1e-6,
            weight_floor: 1e-8,
        }
    }
}

fn std_normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// `K_b(obs - r) = (b1 b2)^-1 K((obs1 - r1)/b1) K((obs2 - r2)/b2)` with `K`
/// the standard normal density.
pub fn gaussian_kernel_weight(obs: GridPoint2D, r: GridPoint2D, b: Bandwidth) -> f64 {
    std_normal_pdf((obs.r1 - r.r1) / b.b1) * std_normal_pdf((obs.r2 - r.r2) / b.b2) / (b.b1 * b.b2)
}

fn log_density(v1: f64, v2: f64, t: &LocalParams) -> f64 {
    let z1 = (v1 - t.mu1) / t.sigma1;
    let z2 = (v2 - t.mu2) / t.sigma2;
    let one_m = 1.0 - t.rho * t.rho;
    let q = z1 * z1 - 2.0 * t.rho * z1 * z2 + z2 * z2;
    -(2.0 * PI).ln() - t.sigma1.ln() - t.sigma2.ln() - 0.5 * one_m.ln() - 0.5 * q / one_m
}

pub fn bivariate_normal_density(v: GridPoint2D, theta: &LocalParams) -> f64 {
    log_density(v.r1, v.r2, theta).exp()
}

/// Penalty integral scaled by `2 pi b1 b2`, together with the gradient of its
/// logarithm in `theta`.
fn scaled_penalty(r: GridPoint2D, b: Bandwidth, t: &LocalParams) -> (f64, [f64; 5]) {
    let (s1, s2) = (t.sigma1, t.sigma2);
    let c11 = s1 * s1 + b.b1 * b.b1;
    let c22 = s2 * s2 + b.b2 * b.b2;
    let c12 = t.rho * s1 * s2;
    let det = c11 * c22 - c12 * c12;
    let d1 = r.r1 - t.mu1;
    let d2 = r.r2 - t.mu2;
    // A = C^-1
    let a11 = c22 / det;
    let a22 = c11 / det;
    let a12 = -c12 / det;
    let ad1 = a11 * d1 + a12 * d2;
    let ad2 = a12 * d1 + a22 * d2;
    let quad = d1 * ad1 + d2 * ad2;
    // det(C) / (b1^2 b2^2), computed without cancellation against b^2.
    let rel_det = (1.0 + s1 * s1 / (b.b1 * b.b1)) * (1.0 + s2 * s2 / (b.b2 * b.b2))
        - (c12 / (b.b1 * b.b2)).powi(2);
    let value = (-0.5 * quad).exp() / rel_det.sqrt();

    // d log phi / dC = -A/2 + (A d)(A d)^T / 2
    let g11 = 0.5 * (ad1 * ad1 - a11);
    let g22 = 0.5 * (ad2 * ad2 - a22);
    let g12 = 0.5 * (ad1 * ad2 - a12);
    let grad = [
        ad1,
        ad2,
        2.0 * s1 * g11 + 2.0 * g12 * t.rho * s2,
        2.0 * s2 * g22 + 2.0 * g12 * t.rho * s1,
        2.0 * g12 * s1 * s2,
    ];
    (value, grad)
}

/// Closed form of `int K_b(v - r) psi(v, theta) dv`: the bivariate normal
/// density with mean `(mu1, mu2)` and covariance
/// `Sigma_theta + diag(b1^2, b2^2)` evaluated at `r`.
pub fn penalty_integral(r: GridPoint2D, b: Bandwidth, theta: &LocalParams) -> f64 {
    scaled_penalty(r, b, theta).0 / (2.0 * PI * b.b1 * b.b2)
}

/// Precomputed kernel weights of a sample around one grid point.
struct LocalObjective<'a> {
    sample: &'a BivariateSample,
    r: GridPoint2D,
    b: Bandwidth,
    /// `exp(-|u_i|^2 / 2)`, i.e. `K_b(R_i - r) * 2 pi b1 b2`.
    weights: Vec<f64>,
}

impl<'a> LocalObjective<'a> {
    fn new(sample: &'a BivariateSample, r: GridPoint2D, b: Bandwidth) -> Self {
        let weights = sample
            .x
            .iter()
            .zip(&sample.y)
            .map(|(x, y)| {
                let u1 = (x - r.r1) / b.b1;
                let u2 = (y - r.r2) / b.b2;
                (-0.5 * (u1 * u1 + u2 * u2)).exp()
            })
            .collect();
        Self {
            sample,
            r,
            b,
            weights,
        }
    }

    fn scale(&self) -> f64 {
        2.0 * PI * self.b.b1 * self.b.b2
    }

    fn mass(&self) -> f64 {
        self.weights.iter().sum::<f64>() / self.weights.len() as f64
    }

    /// Local log likelihood times `2 pi b1 b2`.
    fn value(&self, t: &LocalParams) -> f64 {
        let n = self.weights.len() as f64;
        let data: f64 = self
            .weights
            .iter()
            .zip(self.sample.x.iter().zip(&self.sample.y))
            .map(|(w, (x, y))| w * log_density(*x, *y, t))
            .sum();
        data / n - scaled_penalty(self.r, self.b, t).0
    }

    /// Gradient of [`Self::value`] in theta.
    fn gradient(&self, t: &LocalParams) -> [f64; 5] {
        let n = self.weights.len() as f64;
        let one_m = 1.0 - t.rho * t.rho;
        let inv = 1.0 / one_m;
        let mut acc = [0.0; 5];
        for (w, (x, y)) in self
            .weights
            .iter()
            .zip(self.sample.x.iter().zip(&self.sample.y))
        {
            if *w == 0.0 {
                continue;
            }
            let z1 = (x - t.mu1) / t.sigma1;
            let z2 = (y - t.mu2) / t.sigma2;
            let q = z1 * z1 - 2.0 * t.rho * z1 * z2 + z2 * z2;
            acc[0] += w * (z1 - t.rho * z2) * inv / t.sigma1;
            acc[1] += w * (z2 - t.rho * z1) * inv / t.sigma2;
            acc[2] += w * ((z1 * z1 - t.rho * z1 * z2) * inv - 1.0) / t.sigma1;
            acc[3] += w * ((z2 * z2 - t.rho * z1 * z2) * inv - 1.0) / t.sigma2;
            acc[4] += w * (t.rho * inv + z1 * z2 * inv - t.rho * q * inv * inv);
        }
        let (pen, pen_grad) = scaled_penalty(self.r, self.b, t);
        let mut g = [0.0; 5];
        for j in 0..5 {
            g[j] = acc[j] / n - pen * pen_grad[j];
        }
        g
    }

    fn value_eta(&self, eta: &Vector5<f64>) -> f64 {
        if !eta.iter().all(|v| v.is_finite()) || eta[4].abs() > MAX_ATANH_RHO {
            return f64::NEG_INFINITY;
        }
        let t = LocalParams::from_unconstrained(eta);
        if t.validate().is_err() {
            return f64::NEG_INFINITY;
        }
        let v = self.value(&t);
        if v.is_nan() {
            f64::NEG_INFINITY
        } else {
            v
        }
    }

    fn gradient_eta(&self, eta: &Vector5<f64>) -> Vector5<f64> {
        let t = LocalParams::from_unconstrained(eta);
        let g = self.gradient(&t);
        Vector5::new(
            g[0],
            g[1],
            g[2] * t.sigma1,
            g[3] * t.sigma2,
            g[4] * (1.0 - t.rho * t.rho),
        )
    }

    /// Central-difference Hessian of the analytic gradient, symmetrized.
    fn hessian_eta(&self, eta: &Vector5<f64>) -> Matrix5<f64> {
        let t = LocalParams::from_unconstrained(eta);
        let steps = [
            FD_STEP * t.sigma1,
            FD_STEP * t.sigma2,
            FD_STEP,
            FD_STEP,
            FD_STEP,
        ];
        let mut h = Matrix5::zeros();
        for (j, &step) in steps.iter().enumerate() {
            let mut up = *eta;
            let mut dn = *eta;
            up[j] += step;
            dn[j] -= step;
            let col = (self.gradient_eta(&up) - self.gradient_eta(&dn)) / (2.0 * step);
            h.set_column(j, &col);
        }
        (h + h.transpose()) * 0.5
    }
}

const FD_STEP: f64 = 1e-4;
const MAX_ATANH_RHO: f64 = 15.0;

/// `n^-1 sum_i K_b(R_i - r) log psi(R_i, theta) - penalty_integral(r, b, theta)`.
pub fn local_loglik(
    sample: &BivariateSample,
    r: GridPoint2D,
    b: Bandwidth,
    theta: &LocalParams,
) -> f64 {
    let obj = LocalObjective::new(sample, r, b);
    obj.value(theta) / obj.scale()
}

/// Analytic gradient of [`local_loglik`] with respect to
/// `(mu1, mu2, sigma1, sigma2, rho)`.
pub fn local_score(
    sample: &BivariateSample,
    r: GridPoint2D,
    b: Bandwidth,
    theta: &LocalParams,
) -> [f64; 5] {
    let obj = LocalObjective::new(sample, r, b);
    let s = obj.scale();
    obj.gradient(theta).map(|g| g / s)
}

/// Global Gaussian maximum likelihood estimate (`n` denominators).
pub fn global_mle(sample: &BivariateSample) -> Result<LocalParams, LgcError> {
    let n = sample.len() as f64;
    let m1 = stats::mean(&sample.x);
    let m2 = stats::mean(&sample.y);
    let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
    for (x, y) in sample.x.iter().zip(&sample.y) {
        sxx += (x - m1) * (x - m1);
        syy += (y - m2) * (y - m2);
        sxy += (x - m1) * (y - m2);
    }
    if sxx == 0.0 {
        return Err(LgcError::DegenerateSample { coordinate: 0 });
    }
    if syy == 0.0 {
        return Err(LgcError::DegenerateSample { coordinate: 1 });
    }
    let s1 = (sxx / n).sqrt();
    let s2 = (syy / n).sqrt();
    let rho = (sxy / (sxx * syy).sqrt()).clamp(-RHO_CLAMP, RHO_CLAMP);
    LocalParams::new(m1, m2, s1, s2, rho)
}

/// Largest |rho| a global fit reports; perfectly dependent samples are
/// pulled just inside the open interval.
pub const RHO_CLAMP: f64 = 1.0 - 1e-12;

/// Maximizes the local log likelihood at `r` by a damped Newton iteration in
/// the unconstrained parameterization. The Hessian is a central difference of
/// the analytic score and is made negative definite by eigenvalue
/// modification; steps are accepted by Armijo backtracking.
///
/// Defaults to starting from the global Gaussian fit of the sample.
pub fn estimate_local_params(
    sample: &BivariateSample,
    r: GridPoint2D,
    b: Bandwidth,
    init: Option<LocalParams>,
) -> Result<(LocalParams, FitDiagnostics), LgcError> {
    estimate_local_params_with(sample, r, b, init, &FitOptions::default())
}

pub fn estimate_local_params_with(
    sample: &BivariateSample,
    r: GridPoint2D,
    b: Bandwidth,
    init: Option<LocalParams>,
    opts: &FitOptions,
) -> Result<(LocalParams, FitDiagnostics), LgcError> {
    let obj = LocalObjective::new(sample, r, b);
    let mass = obj.mass();
    if !(mass >= opts.weight_floor) {
        return Err(LgcError::InsufficientLocalData {
            mass,
            floor: opts.weight_floor,
        });
    }
    let effective_weight = mass * sample.len() as f64 / obj.scale();

    let start = match init {
        Some(p) => {
            p.validate()?;
            p
        }
        None => global_mle(sample)?,
    };
    let start = LocalParams {
        rho: start.rho.clamp(-INIT_RHO_CLAMP, INIT_RHO_CLAMP),
        ..start
    };

    let mut eta = start.to_unconstrained();
    let mut f = obj.value_eta(&eta);
    let mut g = obj.gradient_eta(&eta);
    let mut gnorm = g.amax();
    let mut iterations = 0;

    while iterations < opts.max_iterations {
        if gnorm < opts.gradient_tolerance {
            break;
        }
        iterations += 1;
        let direction = newton_direction(&obj.hessian_eta(&eta), &g);
        let slope = g.dot(&direction);
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial = eta + direction * alpha;
            let ft = obj.value_eta(&trial);
            if ft.is_finite() && ft >= f + 1e-4 * alpha * slope {
                accepted = Some((trial, ft));
                break;
            }
            alpha *= 0.5;
        }
        let Some((trial, ft)) = accepted else {
            break;
        };
        eta = trial;
        f = ft;
        g = obj.gradient_eta(&eta);
        gnorm = g.amax();
    }

    let params = LocalParams::from_unconstrained(&eta);
    let diagnostics = FitDiagnostics {
        converged: gnorm < opts.gradient_tolerance,
        iterations,
        gradient_norm: gnorm,
        effective_weight,
    };
    if diagnostics.converged && params.validate().is_ok() {
        Ok((params, diagnostics))
    } else {
        Err(LgcError::NonConvergence {
            iterations,
            gradient_norm: gnorm,
            last: params,
        })
    }
}

const INIT_RHO_CLAMP: f64 = 0.99;

/// Ascent direction `(-H)^+ g` with the spectrum of `-H` reflected and
/// floored so the step is always uphill.
fn newton_direction(hessian: &Matrix5<f64>, g: &Vector5<f64>) -> Vector5<f64> {
    let neg = -hessian;
    if !neg.iter().all(|v| v.is_finite()) {
        return *g;
    }
    let eig = SymmetricEigen::new(neg);
    let top = eig.eigenvalues.amax();
    let floor = (top * 1e-10).max(1e-14);
    let coords = eig.eigenvectors.transpose() * g;
    let scaled = Vector5::from_fn(|i, _| coords[i] / eig.eigenvalues[i].abs().max(floor));
    eig.eigenvectors * scaled
}

/// Plug-in bandwidth `b_k = c * sd_k` with the `n - 1` sample standard deviation.
pub fn plugin_bandwidth(sample: &BivariateSample, c: f64) -> Result<Bandwidth, LgcError> {
    if sample.len() < 2 {
        return Err(LgcError::InvalidSample(
            "plug-in bandwidth needs at least two observations".into(),
        ));
    }
    if !(c > 0.0 && c.is_finite()) {
        return Err(LgcError::InvalidBandwidth { b1: c, b2: c });
    }
    let sd1 = stats::sample_sd(&sample.x);
    let sd2 = stats::sample_sd(&sample.y);
    if sd1 == 0.0 {
        return Err(LgcError::DegenerateSample { coordinate: 0 });
    }
    if sd2 == 0.0 {
        return Err(LgcError::DegenerateSample { coordinate: 1 });
    }
    Bandwidth::new(c * sd1, c * sd2)
}

pub const DEFAULT_BANDWIDTH_CONSTANT: f64 = 1.1;
