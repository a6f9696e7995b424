//! Small dense linear-algebra helpers shared by the fast paths.

use std::f64::consts::PI;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::{Error, Result};

/// Diagonal jitter ladder tried before a matrix is declared non-SPD.
pub const JITTER_LADDER: [f64; 4] = [0.0, 1e-12, 1e-9, 1e-6];

pub type Chol = Cholesky<f64, Dyn>;

/// Cholesky factorization with escalating diagonal jitter.
pub fn robust_cholesky(m: &DMatrix<f64>) -> Result<Chol> {
    for &jitter in &JITTER_LADDER {
        let mut a = m.clone();
        if jitter > 0.0 {
            for i in 0..a.nrows() {
                a[(i, i)] += jitter;
            }
        }
        if let Some(c) = Cholesky::new(a) {
            return Ok(c);
        }
    }
    Err(Error::NumericFailure(format!(
        "{}x{} matrix is not positive definite even with jitter {:e}",
        m.nrows(),
        m.ncols(),
        JITTER_LADDER[JITTER_LADDER.len() - 1]
    )))
}

pub fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in (i + 1)..n {
            let v = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
}

pub fn log_det(chol: &Chol) -> f64 {
    2.0 * chol.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>()
}

/// Gaussian log density given a Cholesky factor of the covariance.
pub fn gaussian_log_density(x: &DVector<f64>, mean: &DVector<f64>, chol: &Chol) -> f64 {
    let d = x.len() as f64;
    let mut r = x - mean;
    chol.l_dirty()
        .solve_lower_triangular_mut(&mut r);
    // The upper triangle of `l_dirty` is garbage, but the lower-triangular
    // solve never reads it.
    -0.5 * (r.norm_squared() + log_det(chol) + d * (2.0 * PI).ln())
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Normalizes log weights in place and returns the log normalizer.
pub fn normalize_log_weights(log_w: &mut [f64]) -> f64 {
    let z = log_sum_exp(log_w);
    for w in log_w.iter_mut() {
        *w -= z;
    }
    z
}

/// Largest eigenvalue of `AᵀA` by power iteration.
pub fn spectral_norm_sq<F, G>(dim: usize, apply: F, adjoint: G) -> f64
where
    F: Fn(&DVector<f64>) -> DVector<f64>,
    G: Fn(&DVector<f64>) -> DVector<f64>,
{
    let mut v = DVector::from_fn(dim, |i, _| 1.0 + 0.1 * (i as f64).sin());
    v /= v.norm();
    let mut est = 0.0;
    for _ in 0..500 {
        let w = adjoint(&apply(&v));
        let n = w.norm();
        if n == 0.0 {
            return 0.0;
        }
        let next = v.dot(&w);
        v = w / n;
        if (next - est).abs() <= 1e-12 * next.abs() {
            return next;
        }
        est = next;
    }
    est
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn jitter_rescues_singular_psd() {
        let m = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(robust_cholesky(&m).is_ok());
        let neg = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(matches!(robust_cholesky(&neg), Err(Error::NumericFailure(_))));
    }

    #[test]
    fn log_sum_exp_handles_far_apart_terms() {
        let v = log_sum_exp(&[-1000.0, -1000.0]);
        assert!((v - (-1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }

    #[test]
    fn standard_normal_log_density_at_mode() {
        let chol = robust_cholesky(&DMatrix::identity(1, 1)).unwrap();
        let v = gaussian_log_density(&DVector::zeros(1), &DVector::zeros(1), &chol);
        assert!((v + 0.5 * (2.0 * PI).ln()).abs() < 1e-14);
    }
}
