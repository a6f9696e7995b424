//! Brute-force verifiers for the analytic fast paths.
//!
//! Nothing here calls into `prior`, `forward` or `sampler` internals:
//! quadrature evaluates Gaussian densities directly, linear systems are
//! solved by Gaussian elimination, and the ULA covariance comes from a
//! doubling iteration on the discrete Lyapunov equation.

use std::f64::consts::PI;

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::prior::GaussianMixture;
use crate::{Error, Result};

/// Minimum node count accepted by [`quadrature_velocity`].
pub const MIN_QUADRATURE_NODES: usize = 4096;

/// Log density values tabulated on a tensor grid of dimension 1 or 2.
#[derive(Debug, Clone)]
pub struct GridDensity {
    pub axes: Vec<Vec<f64>>,
    /// Row-major over `axes` (first axis slowest).
    pub log_values: Vec<f64>,
    pub cell_volume: f64,
}

pub fn uniform_grid(lo: f64, hi: f64, nodes: usize) -> Vec<f64> {
    let step = (hi - lo) / (nodes - 1) as f64;
    (0..nodes).map(|i| lo + step * i as f64).collect()
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

impl GridDensity {
    /// Tabulates `log_f` on uniform axes.
    pub fn from_log_fn<F>(axes: Vec<Vec<f64>>, log_f: F) -> Result<Self>
    where
        F: Fn(&[f64]) -> f64,
    {
        if axes.is_empty() || axes.len() > 2 || axes.iter().any(|a| a.len() < 2) {
            return Err(Error::invalid("grid densities support 1 or 2 axes of >= 2 nodes"));
        }
        let cell_volume = axes.iter().map(|a| a[1] - a[0]).product();
        let log_values = match axes.len() {
            1 => axes[0].iter().map(|&x| log_f(&[x])).collect(),
            _ => axes[0]
                .iter()
                .flat_map(|&a| axes[1].iter().map(move |&b| (a, b)))
                .map(|(a, b)| log_f(&[a, b]))
                .collect(),
        };
        Ok(Self { axes, log_values, cell_volume })
    }

    /// Riemann mass `sum(exp(values)) * cell_volume`.
    pub fn mass(&self) -> f64 {
        self.log_values.iter().map(|v| v.exp()).sum::<f64>() * self.cell_volume
    }

    pub fn normalized(&self) -> Self {
        let z = log_sum_exp(&self.log_values) + self.cell_volume.ln();
        Self {
            axes: self.axes.clone(),
            log_values: self.log_values.iter().map(|v| v - z).collect(),
            cell_volume: self.cell_volume,
        }
    }
}

fn gauss_log_pdf_1d(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((x - mean).powi(2) / var + (2.0 * PI * var).ln())
}

/// Velocity at `(t, x)` of a 1D mixture by trapezoidal quadrature of
/// `E[x0 | x_t]`, independent of the closed-form conditional.
pub fn quadrature_velocity(gmm: &GaussianMixture, t: f64, x: f64, grid: &[f64]) -> Result<f64> {
    if gmm.dim() != 1 {
        return Err(Error::invalid("quadrature velocity is one-dimensional"));
    }
    if !(t > 0.0 && t <= 1.0) {
        return Err(Error::invalid("quadrature velocity needs t in (0, 1]"));
    }
    if grid.len() < MIN_QUADRATURE_NODES {
        return Err(Error::invalid(format!(
            "quadrature grid has {} nodes, need at least {MIN_QUADRATURE_NODES}",
            grid.len()
        )));
    }
    let (lo, hi) = (grid[0], grid[grid.len() - 1]);
    for c in gmm.components() {
        let sd = c.cov[(0, 0)].sqrt();
        if c.mean[0] - 4.0 * sd < lo || c.mean[0] + 4.0 * sd > hi {
            return Err(Error::invalid("quadrature grid must span 8 prior standard deviations"));
        }
    }
    let s = 1.0 - t;
    let log_integrand: Vec<f64> = grid
        .iter()
        .map(|&x0| {
            let terms: Vec<f64> = gmm
                .components()
                .iter()
                .map(|c| c.weight.ln() + gauss_log_pdf_1d(x0, c.mean[0], c.cov[(0, 0)]))
                .collect();
            log_sum_exp(&terms) + gauss_log_pdf_1d(x, s * x0, t * t)
        })
        .collect();
    let peak = log_integrand.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let (mut num, mut den) = (0.0, 0.0);
    for i in 0..grid.len() {
        let w = if i == 0 || i + 1 == grid.len() { 0.5 } else { 1.0 };
        let p = (log_integrand[i] - peak).exp() * w;
        num += p * grid[i];
        den += p;
    }
    let m0 = num / den;
    // v = E[x1|x_t] - E[x0|x_t] with E[x1|x_t] = (x - (1 - t) m0) / t
    Ok((x - m0) / t)
}

/// A grid spanning ten standard deviations past the extreme components.
pub fn default_velocity_grid(gmm: &GaussianMixture, nodes: usize) -> Vec<f64> {
    let lo = gmm
        .components()
        .iter()
        .map(|c| c.mean[0] - 10.0 * c.cov[(0, 0)].sqrt())
        .fold(f64::INFINITY, f64::min);
    let hi = gmm
        .components()
        .iter()
        .map(|c| c.mean[0] + 10.0 * c.cov[(0, 0)].sqrt())
        .fold(f64::NEG_INFINITY, f64::max);
    uniform_grid(lo, hi, nodes.max(MIN_QUADRATURE_NODES))
}

/// Solves a square system by Gaussian elimination with partial pivoting.
pub fn gaussian_elimination(mut a: DMatrix<f64>, mut b: DVector<f64>) -> Result<DVector<f64>> {
    let n = a.nrows();
    if a.ncols() != n || b.len() != n {
        return Err(Error::invalid("elimination needs a square system"));
    }
    let scale = a.amax().max(f64::MIN_POSITIVE);
    for col in 0..n {
        let piv = (col..n)
            .max_by(|&i, &j| a[(i, col)].abs().total_cmp(&a[(j, col)].abs()))
            .unwrap();
        if a[(piv, col)].abs() <= 1e-14 * scale {
            return Err(Error::NumericFailure("singular linear system".into()));
        }
        a.swap_rows(col, piv);
        b.swap_rows(col, piv);
        for r in (col + 1)..n {
            let f = a[(r, col)] / a[(col, col)];
            if f == 0.0 {
                continue;
            }
            for c in col..n {
                a[(r, c)] -= f * a[(col, c)];
            }
            b[r] -= f * b[col];
        }
    }
    let mut x = DVector::zeros(n);
    for r in (0..n).rev() {
        let s: f64 = ((r + 1)..n).map(|c| a[(r, c)] * x[c]).sum();
        x[r] = (b[r] - s) / a[(r, r)];
    }
    Ok(x)
}

/// Direct solve of `(A^T A + lambda I) z = A^T y + lambda * anchor`.
pub fn ridge_closed_form(
    a: &DMatrix<f64>,
    y: &DVector<f64>,
    lambda: f64,
    anchor: &DVector<f64>,
) -> Result<DVector<f64>> {
    if !(lambda > 0.0) {
        return Err(Error::invalid("ridge oracle needs lambda > 0"));
    }
    if a.nrows() != y.len() || a.ncols() != anchor.len() {
        return Err(Error::invalid("ridge oracle dimension mismatch"));
    }
    let d = a.ncols();
    let mut m = a.transpose() * a;
    for i in 0..d {
        m[(i, i)] += lambda;
    }
    let rhs = a.transpose() * y + anchor * lambda;
    gaussian_elimination(m, rhs)
}

/// Stationary covariance of ULA on `N(0, P^-1)`: the fixed point of
/// `S = M S M + 2 zeta I` with `M = I - zeta P`, computed by doubling.
pub fn ula_stationary_covariance(precision: &DMatrix<f64>, zeta: f64) -> Result<DMatrix<f64>> {
    let d = precision.nrows();
    if !precision.is_square() || (precision - precision.transpose()).amax() > 1e-12 * precision.amax() {
        return Err(Error::invalid("precision must be square and symmetric"));
    }
    let eig = SymmetricEigen::new(precision.clone());
    let lmin = eig.eigenvalues.min();
    let lmax = eig.eigenvalues.max();
    if !(lmin > 0.0) {
        return Err(Error::invalid("precision must be positive definite"));
    }
    if !(zeta > 0.0 && zeta < 2.0 / lmax) {
        return Err(Error::invalid(format!(
            "step {zeta} is unstable for largest precision eigenvalue {lmax}"
        )));
    }
    let mut m = DMatrix::<f64>::identity(d, d) - precision * zeta;
    let mut s = DMatrix::<f64>::identity(d, d) * (2.0 * zeta);
    for _ in 0..200 {
        let inc = &m * &s * m.transpose();
        let done = inc.amax() <= 1e-12 * s.amax();
        s += inc;
        if done {
            return Ok(s);
        }
        m = &m * &m;
    }
    Err(Error::NumericFailure("Lyapunov doubling did not converge".into()))
}

/// Central-difference gradient.
pub fn finite_difference_gradient<F>(f: F, x: &DVector<f64>, h: f64) -> Result<DVector<f64>>
where
    F: Fn(&DVector<f64>) -> f64,
{
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let mut probe = x.clone();
    let mut g = DVector::zeros(x.len());
    for i in 0..x.len() {
        probe[i] = x[i] + h;
        let up = f(&probe);
        probe[i] = x[i] - h;
        let down = f(&probe);
        probe[i] = x[i];
        g[i] = (up - down) / (2.0 * h);
    }
    Ok(g)
}

/// Empirical-vs-analytic moment comparison with per-entry standard errors.
#[derive(Debug, Clone)]
pub struct MomentReport {
    pub n: usize,
    pub mean_error: DVector<f64>,
    pub mean_se: DVector<f64>,
    pub cov_error: DMatrix<f64>,
    pub cov_se: DMatrix<f64>,
}

impl MomentReport {
    pub fn max_mean_error(&self) -> f64 {
        self.mean_error.amax()
    }

    pub fn max_cov_error(&self) -> f64 {
        self.cov_error.amax()
    }

    /// Largest error measured in standard errors.
    pub fn worst_z(&self) -> f64 {
        let zm = self
            .mean_error
            .iter()
            .zip(self.mean_se.iter())
            .map(|(e, s)| e / s)
            .fold(0.0, f64::max);
        let zc = self
            .cov_error
            .iter()
            .zip(self.cov_se.iter())
            .map(|(e, s)| e / s)
            .fold(0.0, f64::max);
        zm.max(zc)
    }

    pub fn within(&self, k_se: f64) -> bool {
        self.worst_z() <= k_se
    }
}

pub fn moment_distance(samples: &[DVector<f64>], target: &GaussianMixture) -> Result<MomentReport> {
    let n = samples.len();
    if n < 1000 {
        return Err(Error::invalid(format!("moment test needs >= 1000 samples, got {n}")));
    }
    let d = target.dim();
    if samples.iter().any(|s| s.len() != d) {
        return Err(Error::dims("moment sample", d, samples[0].len()));
    }
    let nf = n as f64;
    let emp_mean = samples.iter().fold(DVector::zeros(d), |a, x| a + x) / nf;
    let mut emp_cov = DMatrix::zeros(d, d);
    for x in samples {
        let dx = x - &emp_mean;
        emp_cov += &dx * dx.transpose();
    }
    emp_cov /= nf - 1.0;

    // Analytic moments by total expectation/covariance, computed here
    // rather than through the mixture helpers.
    let mut mean = DVector::zeros(d);
    for c in target.components() {
        mean += &c.mean * c.weight;
    }
    let mut cov = DMatrix::zeros(d, d);
    for c in target.components() {
        let dm = &c.mean - &mean;
        cov += (&c.cov + &dm * dm.transpose()) * c.weight;
    }

    let mean_se = DVector::from_fn(d, |i, _| (cov[(i, i)] / nf).sqrt());
    let mut cov_se = DMatrix::zeros(d, d);
    for i in 0..d {
        for j in 0..d {
            let prods: Vec<f64> = samples
                .iter()
                .map(|x| (x[i] - emp_mean[i]) * (x[j] - emp_mean[j]))
                .collect();
            let pm = prods.iter().sum::<f64>() / nf;
            let pv = prods.iter().map(|p| (p - pm).powi(2)).sum::<f64>() / (nf - 1.0);
            // floor keeps degenerate (constant) samples from producing 0/0
            cov_se[(i, j)] = (pv / nf).sqrt().max(f64::MIN_POSITIVE);
        }
    }
    Ok(MomentReport {
        n,
        mean_error: (emp_mean - mean).abs(),
        mean_se,
        cov_error: (emp_cov - cov).abs(),
        cov_se,
    })
}
