//! Independent reference computations shared by the integration suites.
#![allow(dead_code)]

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use lgportf::panel::ReturnPanel;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller, kept separate from the library's sampler.
    let u1: f64 = rng.random::<f64>().max(1e-300);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * PI * u2).cos()
}

pub fn uniform(rng: &mut ChaCha8Rng, lo: f64, hi: f64) -> f64 {
    lo + (hi - lo) * rng.random::<f64>()
}

// 15-point Kronrod nodes on [-1, 1] (non-negative half) and weights, with the
// embedded 7-point Gauss weights at the odd-indexed nodes.
const XGK: [f64; 8] = [
    0.991455371120812639206854697526329,
    0.949107912342758524526189684047851,
    0.864864423359769072789712788640926,
    0.741531185599394439863864773280788,
    0.586087235467691130294144845693013,
    0.405845151377397166906606412076961,
    0.207784955007898467600689403773245,
    0.0,
];
const WGK: [f64; 8] = [
    0.022935322010529224963732008058970,
    0.063092092629978553290700663189204,
    0.104790010322250183839876322541518,
    0.140653259715525918745189590510238,
    0.169004726639267902826583426598550,
    0.190350578064785409913256402421014,
    0.204432940075298892414161999234649,
    0.209482141084727828012999174891714,
];
const WG: [f64; 4] = [
    0.129484966168869693270611432679082,
    0.279705391489276667901467771423780,
    0.381830050505118944950369775488975,
    0.417959183673469387755102040816327,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = fc * WGK[7];
    let mut gauss = fc * WG[3];
    for i in 0..7 {
        let x = h * XGK[i];
        let s = f(c - x) + f(c + x);
        kronrod += WGK[i] * s;
        if i % 2 == 1 {
            gauss += WG[i / 2] * s;
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

fn adapt<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64, tol: f64, depth: u32) -> f64 {
    let (k, err) = gk15(f, a, b);
    if err <= tol.max(50.0 * f64::EPSILON * k.abs()).max(1e-300) || depth == 0 {
        return k;
    }
    let m = 0.5 * (a + b);
    adapt(f, a, m, 0.5 * tol, depth - 1) + adapt(f, m, b, 0.5 * tol, depth - 1)
}

/// Adaptive Gauss-Kronrod quadrature of `f` over `[a, b]`. The interval is
/// first cut into unit-width panels so that a single 15-point rule cannot
/// step over a narrow peak and report a small error estimate.
pub fn quad<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, tol: f64) -> f64 {
    let panels = ((b - a).ceil() as usize).max(1);
    let h = (b - a) / panels as f64;
    (0..panels)
        .map(|i| adapt(&f, a + i as f64 * h, a + (i + 1) as f64 * h, tol / panels as f64, 30))
        .sum()
}

/// Nested adaptive quadrature over a rectangle.
pub fn quad2<F: Fn(f64, f64) -> f64>(f: F, x: (f64, f64), y: (f64, f64), tol: f64) -> f64 {
    let width = y.1 - y.0;
    quad(|u| quad(|v| f(u, v), y.0, y.1, tol / width.max(1.0)), x.0, x.1, tol)
}

/// Bivariate normal density written out from the textbook formula.
pub fn bvn_pdf(x: f64, y: f64, mu1: f64, mu2: f64, s1: f64, s2: f64, rho: f64) -> f64 {
    let z1 = (x - mu1) / s1;
    let z2 = (y - mu2) / s2;
    let omr = 1.0 - rho * rho;
    let q = (z1 * z1 - 2.0 * rho * z1 * z2 + z2 * z2) / omr;
    (-0.5 * q).exp() / (2.0 * PI * s1 * s2 * omr.sqrt())
}

pub fn std_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

/// `int K_b(v - r) psi(v) dv`, by quadrature in kernel coordinates
/// `v = r + b u` over `[-10, 10]^2`.
pub fn penalty_by_quadrature(r: (f64, f64), b: (f64, f64), th: [f64; 5], tol: f64) -> f64 {
    quad2(
        |u1, u2| {
            std_pdf(u1)
                * std_pdf(u2)
                * bvn_pdf(r.0 + b.0 * u1, r.1 + b.1 * u2, th[0], th[1], th[2], th[3], th[4])
        },
        (-10.0, 10.0),
        (-10.0, 10.0),
        tol,
    )
}

/// Kernel-weighted log-likelihood sum, term by term.
pub fn loglik_sum(x: &[f64], y: &[f64], r: (f64, f64), b: (f64, f64), th: [f64; 5]) -> f64 {
    let n = x.len() as f64;
    let mut s = 0.0;
    for (xi, yi) in x.iter().zip(y) {
        let k = std_pdf((xi - r.0) / b.0) * std_pdf((yi - r.1) / b.1) / (b.0 * b.1);
        s += k * bvn_pdf(*xi, *yi, th[0], th[1], th[2], th[3], th[4]).ln();
    }
    s / n
}

pub fn bivariate_gaussian(rng: &mut ChaCha8Rng, n: usize, rho: f64) -> (Vec<f64>, Vec<f64>) {
    let s = (1.0 - rho * rho).sqrt();
    (0..n)
        .map(|_| {
            let a = normal(rng);
            let b = normal(rng);
            (a, rho * a + s * b)
        })
        .unzip()
}

/// Random symmetric positive definite matrix with eigenvalues in `[lo, hi]`.
pub fn random_spd(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| normal(rng));
    let q = a.qr().q();
    let d = DVector::from_fn(n, |_, _| uniform(rng, lo, hi));
    let m = &q * DMatrix::from_diagonal(&d) * q.transpose();
    (&m + m.transpose()) * 0.5
}

/// Symmetric unit-diagonal matrix with a negative eigenvalue.
pub fn random_indefinite_corr(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    loop {
        let mut m = DMatrix::identity(n, n);
        for i in 0..n {
            for j in 0..i {
                let v = uniform(rng, -1.0, 1.0);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        if SymmetricEigen::new(m.clone()).eigenvalues.min() < -1e-3 {
            return m;
        }
    }
}

/// Eigenvalue clipping at zero followed by rescaling to unit diagonal.
pub fn clip_to_correlation(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let d = eig.eigenvalues.map(|l| l.max(0.0));
    let p = &eig.eigenvectors * DMatrix::from_diagonal(&d) * eig.eigenvectors.transpose();
    let n = m.nrows();
    DMatrix::from_fn(n, n, |i, j| {
        if i == j {
            1.0
        } else {
            p[(i, j)] / (p[(i, i)] * p[(j, j)]).sqrt()
        }
    })
}

/// `Sigma^-1 1 / (1' Sigma^-1 1)`.
pub fn analytic_minvar(sigma: &DMatrix<f64>) -> Vec<f64> {
    let inv = sigma.clone().try_inverse().expect("invertible");
    let ones = DVector::from_element(sigma.nrows(), 1.0);
    let a = &inv * &ones;
    let s = a.sum();
    a.iter().map(|v| v / s).collect()
}

/// Budget-constrained mean-variance optimum from the Lagrangian:
/// `w = Sigma^-1 (mu - nu 1) / gamma` with `nu` fixing `1'w = 1`.
pub fn analytic_mv(mu: &[f64], sigma: &DMatrix<f64>, gamma: f64) -> Vec<f64> {
    let inv = sigma.clone().try_inverse().expect("invertible");
    let ones = DVector::from_element(mu.len(), 1.0);
    let m = DVector::from_column_slice(mu);
    let a = ones.dot(&(&inv * &ones));
    let b = ones.dot(&(&inv * &m));
    let nu = (b - gamma) / a;
    let w = &inv * (m - ones * nu) / gamma;
    w.iter().copied().collect()
}

pub fn objective(h: &DMatrix<f64>, c: &[f64], w: &[f64]) -> f64 {
    let mut q = 0.0;
    for i in 0..w.len() {
        for j in 0..w.len() {
            q += w[i] * h[(i, j)] * w[j];
        }
    }
    0.5 * q - c.iter().zip(w).map(|(a, b)| a * b).sum::<f64>()
}

/// Exhaustive search over the three-asset budget simplex `w_i >= lower` on a
/// lattice of the given step.
pub fn simplex_grid_min(h: &DMatrix<f64>, c: &[f64], lower: f64, step: f64) -> (Vec<f64>, f64) {
    assert_eq!(c.len(), 3);
    let span = 1.0 - 3.0 * lower;
    let k = (span / step).round() as i64;
    let mut best = (vec![], f64::INFINITY);
    for i in 0..=k {
        for j in 0..=(k - i) {
            let w = vec![
                lower + i as f64 * step,
                lower + j as f64 * step,
                lower + (k - i - j) as f64 * step,
            ];
            let v = objective(h, c, &w);
            if v < best.1 {
                best = (w, v);
            }
        }
    }
    best
}

/// Euclidean projection onto `{w : 1'w = 1, w >= lower}`.
pub fn project_budget(v: &[f64], lower: f64) -> Vec<f64> {
    let n = v.len();
    let z = 1.0 - n as f64 * lower;
    let shifted: Vec<f64> = v.iter().map(|x| x - lower).collect();
    let mut u = shifted.clone();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut css = 0.0;
    let mut theta = 0.0;
    for (i, ui) in u.iter().enumerate() {
        css += ui;
        let t = (css - z) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    shifted.iter().map(|x| (x - theta).max(0.0) + lower).collect()
}

/// Accelerated projected gradient for the budget QP.
pub fn projected_gradient(h: &DMatrix<f64>, c: &[f64], lower: f64, iters: usize) -> Vec<f64> {
    let n = c.len();
    let lmax = SymmetricEigen::new(h.clone()).eigenvalues.max();
    let step = 1.0 / lmax;
    let mut w = vec![1.0 / n as f64; n];
    let mut y = w.clone();
    let mut t = 1.0f64;
    for _ in 0..iters {
        let g: Vec<f64> = (0..n)
            .map(|i| (0..n).map(|j| h[(i, j)] * y[j]).sum::<f64>() - c[i])
            .collect();
        let cand: Vec<f64> = y.iter().zip(&g).map(|(a, b)| a - step * b).collect();
        let next = project_budget(&cand, lower);
        let t_next = 0.5 * (1.0 + (1.0 + 4.0 * t * t).sqrt());
        y = next
            .iter()
            .zip(&w)
            .map(|(a, b)| a + (t - 1.0) / t_next * (a - b))
            .collect();
        w = next;
        t = t_next;
    }
    w
}

/// Random panel of percent returns.
pub fn random_panel(rng: &mut ChaCha8Rng, rows: usize, assets: usize) -> ReturnPanel {
    let cols: Vec<Vec<f64>> = (0..assets)
        .map(|j| {
            let sd = 2.0 + j as f64;
            (0..rows).map(|_| 0.5 + sd * normal(rng)).collect()
        })
        .collect();
    ReturnPanel::from_columns(cols).unwrap()
}

/// Terminal wealth of a drifting equal-weight portfolio: the average of each
/// asset's compounded growth.
pub fn ew_buy_and_hold_wealth(panel: &ReturnPanel, start: usize) -> Vec<f64> {
    let n = panel.n_assets() as f64;
    let mut growth = vec![1.0; panel.n_assets()];
    let mut out = vec![1.0];
    for t in start..panel.n_rows() {
        for (j, g) in growth.iter_mut().enumerate() {
            *g *= 1.0 + panel.column(j)[t] / 100.0;
        }
        out.push(growth.iter().sum::<f64>() / n);
    }
    out
}

pub fn frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm()
}
