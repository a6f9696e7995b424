//! The three inner moves of a flow step: pCN re-noising, the Langevin
//! anchoring chain and the proximal mode-seeking solve.

use std::f64::consts::PI;

use nalgebra::DVector;
use rand::Rng;

use super::config::ProximalSolver;
use crate::forward::Measurement;
use crate::linalg;
use crate::rng::standard_normal;
use crate::{Error, Result};

/// One pCN move `rho * x + sqrt(1 - rho^2) * z`, `z ~ N(0, I)`.
///
/// The noise is always drawn so that the random stream advances the same
/// way for every `rho`.
pub fn pcn_renoise<R: Rng + ?Sized>(x1_hat: &DVector<f64>, rho: f64, rng: &mut R) -> Result<DVector<f64>> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::invalid(format!("pCN mixing coefficient {rho} outside [0, 1]")));
    }
    let z = standard_normal(rng, x1_hat.len());
    Ok(x1_hat * rho + z * (1.0 - rho * rho).sqrt())
}

fn log_normal_iso(x: &DVector<f64>, mean: &DVector<f64>, var: f64) -> f64 {
    let d = x.len() as f64;
    -0.5 * ((x - mean).norm_squared() / var + d * (2.0 * PI * var).ln())
}

/// Metropolis-Hastings log ratio of a pCN proposal `old -> new` targeting
/// `N(0, I)`. Identically zero for `rho < 1`.
pub fn pcn_log_acceptance(old: &DVector<f64>, new: &DVector<f64>, rho: f64) -> f64 {
    let var = 1.0 - rho * rho;
    let zero = DVector::zeros(old.len());
    let forward = log_normal_iso(new, &zero, 1.0) + log_normal_iso(old, &(new * rho), var);
    let backward = log_normal_iso(old, &zero, 1.0) + log_normal_iso(new, &(old * rho), var);
    forward - backward
}

/// Drift of the Langevin chain: `J^T A^T (y - A D z) / sigma_n^2 - (z - anchor) / t`.
pub fn langevin_drift(meas: &Measurement, anchor: &DVector<f64>, z: &DVector<f64>, t: f64) -> Result<DVector<f64>> {
    let lik = meas.data_fidelity_grad(z)? * (-0.5 / (meas.sigma_n * meas.sigma_n));
    Ok(lik - (z - anchor) / t)
}

/// ULA on `p(z | x_t, y)` under the Gaussian surrogate `N(anchor, t I)`.
/// The anchor stays fixed for the whole chain.
pub fn langevin_phase<R: Rng + ?Sized>(
    meas: &Measurement,
    anchor: &DVector<f64>,
    z_init: &DVector<f64>,
    t: f64,
    n_steps: usize,
    zeta: f64,
    rng: &mut R,
) -> Result<DVector<f64>> {
    if n_steps == 0 {
        return Ok(z_init.clone());
    }
    if !(meas.sigma_n > 0.0) {
        return Err(Error::invalid("Langevin likelihood score needs sigma_n > 0"));
    }
    if !(t > 0.0) {
        return Err(Error::invalid("Langevin surrogate variance s_t^2 = t must be positive"));
    }
    let noise_scale = (2.0 * zeta).sqrt();
    let mut z = z_init.clone();
    for _ in 0..n_steps {
        let drift = langevin_drift(meas, anchor, &z, t)?;
        let eps = standard_normal(rng, z.len());
        z += drift * zeta + eps * noise_scale;
    }
    Ok(z)
}

/// Proximal weight `sigma_n^2 / s_t^2` with `s_t^2 = t`.
pub fn proximal_lambda(sigma_n: f64, t: f64) -> f64 {
    sigma_n * sigma_n / t
}

/// `||y - A D z||^2 + lambda ||z - anchor||^2`.
pub fn proximal_objective(meas: &Measurement, anchor: &DVector<f64>, lambda: f64, z: &DVector<f64>) -> Result<f64> {
    Ok(meas.data_fidelity(z)? + lambda * (z - anchor).norm_squared())
}

fn require_linear(meas: &Measurement, solver: &str) -> Result<()> {
    if meas.decoder.is_identity() {
        Ok(())
    } else {
        Err(Error::Unsupported(format!("{solver} needs the identity decoder")))
    }
}

/// Minimizes the proximal objective starting from the anchor.
///
/// `iterations` is the budget left after the Langevin chain; a zero
/// budget returns the anchor for every solver. Gradient descent runs
/// exactly `iterations` steps; the two linear solvers run to completion.
pub fn proximal_phase(
    meas: &Measurement,
    anchor: &DVector<f64>,
    t: f64,
    solver: &ProximalSolver,
    iterations: usize,
) -> Result<DVector<f64>> {
    if !(t > 0.0) {
        return Err(Error::invalid("proximal phase needs t > 0"));
    }
    if anchor.len() != meas.latent_dim() {
        return Err(Error::dims("proximal anchor", meas.latent_dim(), anchor.len()));
    }
    if iterations == 0 {
        return Ok(anchor.clone());
    }
    let lambda = proximal_lambda(meas.sigma_n, t);
    match *solver {
        ProximalSolver::ExactRidge => exact_ridge(meas, anchor, lambda),
        ProximalSolver::ConjugateGradient { tol, max_iter } => conjugate_gradient(meas, anchor, lambda, tol, max_iter),
        ProximalSolver::GradientDescent { lr, decay_factor, decay_every } => {
            gradient_descent(meas, anchor, lambda, lr, decay_factor, decay_every, iterations)
        }
    }
}

/// `(A^T A + lambda I)^-1 (A^T y + lambda * anchor)` by Cholesky.
pub fn exact_ridge(meas: &Measurement, anchor: &DVector<f64>, lambda: f64) -> Result<DVector<f64>> {
    require_linear(meas, "exact ridge")?;
    let a = meas.operator.to_dense();
    let mut normal = a.tr_mul(&a);
    for i in 0..normal.nrows() {
        normal[(i, i)] += lambda;
    }
    let rhs = a.tr_mul(&meas.y) + anchor * lambda;
    let chol = linalg::robust_cholesky(&normal)?;
    Ok(chol.solve(&rhs))
}

/// Matrix-free conjugate gradient on the ridge normal equations, warm-started at the anchor.
pub fn conjugate_gradient(
    meas: &Measurement,
    anchor: &DVector<f64>,
    lambda: f64,
    tol: f64,
    max_iter: usize,
) -> Result<DVector<f64>> {
    require_linear(meas, "conjugate gradient")?;
    let op = &meas.operator;
    let normal = |v: &DVector<f64>| op.adjoint_unchecked(&op.apply_unchecked(v)) + v * lambda;
    let b = op.adjoint_unchecked(&meas.y) + anchor * lambda;
    let b_norm = b.norm();
    let mut x = anchor.clone();
    let mut r = &b - normal(&x);
    let mut p = r.clone();
    let mut rs = r.norm_squared();
    for _ in 0..max_iter {
        if rs.sqrt() <= tol * b_norm {
            break;
        }
        let ap = normal(&p);
        let pap = p.dot(&ap);
        if pap <= 0.0 {
            break;
        }
        let step = rs / pap;
        x.axpy(step, &p, 1.0);
        r.axpy(-step, &ap, 1.0);
        let rs_new = r.norm_squared();
        p = &r + &p * (rs_new / rs);
        rs = rs_new;
    }
    Ok(x)
}

/// Step-decayed gradient descent on the (possibly nonlinear) proximal objective.
pub fn gradient_descent(
    meas: &Measurement,
    anchor: &DVector<f64>,
    lambda: f64,
    lr: f64,
    decay_factor: f64,
    decay_every: usize,
    iterations: usize,
) -> Result<DVector<f64>> {
    let mut z = anchor.clone();
    let mut rate = lr;
    for k in 0..iterations {
        if k > 0 && k % decay_every == 0 {
            rate *= decay_factor;
        }
        let grad = meas.data_fidelity_grad(&z)? + (&z - anchor) * (2.0 * lambda);
        z.axpy(-rate, &grad, 1.0);
    }
    Ok(z)
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::DMatrix;
    use crate::forward::{Decoder, ForwardOperator};
    use crate::oracle;
    use crate::rng;

    fn scalar_meas(y: f64, sigma: f64) -> Measurement {
        Measurement::new(DVector::from_element(1, y), ForwardOperator::identity(1), Decoder::Identity, sigma).unwrap()
    }

    #[test]
    fn pcn_examples() {
        let x = DVector::from_vec(vec![0.4, -1.2, 3.0]);
        let mut r = rng::derive(1, "pcn", 0);
        assert_eq!(pcn_renoise(&x, 1.0, &mut r).unwrap(), x);
        let a = pcn_renoise(&x, 0.0, &mut rng::derive(2, "pcn", 0)).unwrap();
        let b = pcn_renoise(&(&x * 5.0), 0.0, &mut rng::derive(2, "pcn", 0)).unwrap();
        assert_eq!(a, b);
        assert!(pcn_renoise(&x, 1.1, &mut r).is_err());
    }

    #[test]
    fn pcn_acceptance_is_one() {
        let mut r = rng::derive(3, "pcn", 0);
        for &rho in &[0.0, 0.3, 0.9] {
            for _ in 0..50 {
                let old = standard_normal(&mut r, 4);
                let new = pcn_renoise(&old, rho, &mut r).unwrap();
                assert!(pcn_log_acceptance(&old, &new, rho).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn langevin_zero_steps_and_stationary_drift() {
        let meas = Measurement::new(
            DVector::from_vec(vec![1.0, 2.0]),
            ForwardOperator::identity(2),
            Decoder::Identity,
            0.1,
        )
        .unwrap();
        let anchor = DVector::from_vec(vec![1.0, 2.0]);
        let z0 = DVector::from_vec(vec![5.0, 5.0]);
        let mut r = rng::derive(1, "l", 0);
        assert_eq!(langevin_phase(&meas, &anchor, &z0, 0.5, 0, 1e-4, &mut r).unwrap(), z0);
        assert_eq!(langevin_drift(&meas, &anchor, &anchor, 0.5).unwrap(), DVector::zeros(2));

        let zeta = 1e-4;
        let out = langevin_phase(&meas, &anchor, &anchor, 0.5, 1, zeta, &mut rng::derive(9, "l", 0)).unwrap();
        let eps = standard_normal(&mut rng::derive(9, "l", 0), 2);
        assert!((&out - (&anchor + eps * (2.0 * zeta).sqrt())).amax() < 1e-15);

        let zero_noise = Measurement { sigma_n: 0.0, ..meas };
        assert!(langevin_phase(&zero_noise, &anchor, &z0, 0.5, 1, 1e-4, &mut r).is_err());
    }

    #[test]
    fn ridge_scalar_and_dominant_regularizer() {
        // sigma_n = 1, t = 1 -> lambda = 1
        let z = proximal_phase(&scalar_meas(1.0, 1.0), &DVector::zeros(1), 1.0, &ProximalSolver::ExactRidge, 1).unwrap();
        assert!((z[0] - 0.5).abs() < 1e-15);

        let meas = scalar_meas(1.0, 1e3);
        let anchor = DVector::from_element(1, 0.25);
        let z = proximal_phase(&meas, &anchor, 1.0, &ProximalSolver::ExactRidge, 1).unwrap();
        assert!((&z - &anchor).norm() <= 1e-5 * meas.y.norm());
    }

    #[test]
    fn zero_budget_returns_anchor() {
        let anchor = DVector::from_element(1, 0.3);
        for s in [
            ProximalSolver::ExactRidge,
            ProximalSolver::ConjugateGradient { tol: 1e-10, max_iter: 10 },
            ProximalSolver::GradientDescent { lr: 0.1, decay_factor: 0.5, decay_every: 2 },
        ] {
            assert_eq!(proximal_phase(&scalar_meas(1.0, 0.1), &anchor, 0.5, &s, 0).unwrap(), anchor);
        }
    }

    #[test]
    fn linear_solvers_reject_nonlinear_decoder() {
        let dec = Decoder::random_smooth(2, 0.2, &mut rng::derive(1, "d", 0));
        let meas = Measurement::new(DVector::zeros(2), ForwardOperator::identity(2), dec, 0.1).unwrap();
        let a = DVector::zeros(2);
        assert!(matches!(
            proximal_phase(&meas, &a, 0.5, &ProximalSolver::ExactRidge, 1),
            Err(Error::Unsupported(_))
        ));
        assert!(matches!(
            proximal_phase(&meas, &a, 0.5, &ProximalSolver::ConjugateGradient { tol: 1e-8, max_iter: 5 }, 1),
            Err(Error::Unsupported(_))
        ));
        let gd = ProximalSolver::GradientDescent { lr: 0.1, decay_factor: 1.0, decay_every: 1 };
        assert!(proximal_phase(&meas, &a, 0.5, &gd, 3).is_ok());
    }

    /// Random `m x d` operator whose squared singular values lie in `[lo, hi]`.
    fn banded_operator<R: Rng>(m: usize, d: usize, lo: f64, hi: f64, rng: &mut R) -> DMatrix<f64> {
        let g = DMatrix::from_iterator(d, d, standard_normal(rng, d * d).iter().cloned());
        let q = g.qr().q();
        let h = DMatrix::from_iterator(m, m, standard_normal(rng, m * m).iter().cloned());
        let u = h.qr().q();
        let s = DMatrix::from_fn(m, d, |i, j| {
            if i == j { (lo + (hi - lo) * rng.random::<f64>()).sqrt() } else { 0.0 }
        });
        u * s * q.transpose()
    }

    #[test]
    fn paper_schedule_gradient_descent_reaches_ridge() {
        // lr 0.1 decayed by 0.65 every 10 steps has a bounded total step
        // length, so convergence is only reachable when A^T A is not too
        // ill-conditioned.
        let mut r = rng::derive(21, "gd", 0);
        for case in 0..20 {
            let a = banded_operator(8, 16, 2.0, 8.0, &mut r);
            let y = standard_normal(&mut r, 8);
            let anchor = standard_normal(&mut r, 16);
            let t = [0.1, 0.5, 0.9][case % 3];
            let meas = Measurement::new(y.clone(), ForwardOperator::dense(a.clone()), Decoder::Identity, 0.03).unwrap();
            let exact = oracle::ridge_closed_form(&a, &y, proximal_lambda(0.03, t), &anchor).unwrap();
            let gd = ProximalSolver::GradientDescent { lr: 0.1, decay_factor: 0.65, decay_every: 10 };
            let z = proximal_phase(&meas, &anchor, t, &gd, 300).unwrap();
            let rel = (&z - &exact).norm() / exact.norm();
            assert!(rel < 1e-4, "case {case}: {rel}");
        }
    }

    #[test]
    fn gradient_descent_monotone_on_nonlinear_decoder() {
        let mut r = rng::derive(4, "gd", 0);
        let dec = Decoder::random_smooth(6, 0.2, &mut r);
        let op = ForwardOperator::mask(6, vec![0, 2, 3, 5]).unwrap();
        let truth = standard_normal(&mut r, 6);
        let meas = crate::forward::simulate_measurement(&truth, &op, &dec, 0.05, &mut r).unwrap();
        let anchor = DVector::zeros(6);
        let lambda = proximal_lambda(0.05, 0.5);
        let before = proximal_objective(&meas, &anchor, lambda, &anchor).unwrap();
        let gd = ProximalSolver::GradientDescent { lr: 0.05, decay_factor: 1.0, decay_every: 1 };
        let z = proximal_phase(&meas, &anchor, 0.5, &gd, 50).unwrap();
        let after = proximal_objective(&meas, &anchor, lambda, &z).unwrap();
        assert!(after < 0.5 * before, "{before} -> {after}");
    }
}
