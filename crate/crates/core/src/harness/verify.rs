//! Oracle-backed invariant checks.
//!
//! Each check returns a [`CheckResult`]; `verify_suite` runs a fixed list
//! of them and the acceptance tests call them with their own sizes.

use std::f64::consts::PI;
use std::io::Write;
use std::time::Instant;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::Rng;
use serde::Serialize;

use crate::baselines::{preset_unconditional, SolverKind};
use crate::forward::{Decoder, ForwardOperator, Measurement, SignalShape};
use crate::oracle::{
    default_velocity_grid, finite_difference_gradient, moment_distance, quadrature_velocity, ridge_closed_form,
    ula_stationary_covariance, GridDensity,
};
use crate::prior::{Component, GaussianMixture};
use crate::rng::{self, standard_normal};
use crate::sampler::{
    conjugate_gradient, euler_trajectory, gradient_descent, langevin_phase, pcn_log_acceptance, pcn_renoise,
    proximal_lambda, time_schedule, LangevinSteps, LpsConfig, ProximalSolver, RhoSchedule, Sampler, TaskPreset,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Level {
    Fast,
    Full,
}

impl std::str::FromStr for Level {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fast" => Ok(Level::Fast),
            "full" => Ok(Level::Full),
            other => Err(Error::Config(format!("unknown verify level `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

impl CheckResult {
    fn from_outcome(name: &str, start: Instant, outcome: Result<(bool, String)>) -> Self {
        let (passed, detail) = outcome.unwrap_or_else(|e| (false, format!("error: {e}")));
        Self { name: name.into(), passed, detail, seconds: start.elapsed().as_secs_f64() }
    }
}

fn timed(name: &str, f: impl FnOnce() -> Result<(bool, String)>) -> CheckResult {
    let start = Instant::now();
    let outcome = f();
    CheckResult::from_outcome(name, start, outcome)
}

fn gaussian_matrix<R: Rng + ?Sized>(rows: usize, cols: usize, scale: f64, rng: &mut R) -> DMatrix<f64> {
    let z = standard_normal(rng, rows * cols);
    DMatrix::from_column_slice(rows, cols, z.as_slice()) * scale
}

/// Gradient descent and conjugate gradient against the closed-form ridge
/// solution on random `8 x 16` problems with `lambda = sigma_n^2 / t`.
pub fn proximal_equivalence(n_instances: usize, seed: u64) -> CheckResult {
    timed("proximal-equivalence", || {
        let (m, d, sigma_n) = (8, 16, 0.03);
        let mut rng = rng::derive(seed, "proximal-equivalence", 0);
        let mut worst: f64 = 0.0;
        for i in 0..n_instances {
            let t = [0.1, 0.5, 0.9][i % 3];
            let a = gaussian_matrix(m, d, 1.0 / (m as f64).sqrt(), &mut rng);
            let y = standard_normal(&mut rng, m);
            let anchor = standard_normal(&mut rng, d);
            let lambda = proximal_lambda(sigma_n, t);
            let meas = Measurement::new(y.clone(), ForwardOperator::dense(a.clone()), Decoder::Identity, sigma_n)?;
            let reference = ridge_closed_form(&a, &y, lambda, &anchor)?;
            let eig = SymmetricEigen::new(&a * a.transpose()).eigenvalues;
            let (smax, smin) = (eig.max() + lambda, eig.min() + lambda);
            let iterations = ((smax / smin) * 30.0).ceil() as usize;
            let gd = gradient_descent(&meas, &anchor, lambda, 0.5 / smax, 1.0, 1, iterations)?;
            let cg = conjugate_gradient(&meas, &anchor, lambda, 1e-14, 10 * d)?;
            for z in [gd, cg] {
                worst = worst.max((&z - &reference).norm() / reference.norm());
            }
        }
        Ok((worst <= 1e-4, format!("{n_instances} instances, worst relative error {worst:.3e}")))
    })
}

fn two_component_prior() -> GaussianMixture {
    GaussianMixture::new(vec![
        Component::new(
            0.4,
            DVector::from_vec(vec![-1.0, 0.5]),
            DMatrix::from_row_slice(2, 2, &[0.3, 0.1, 0.1, 0.2]),
        ),
        Component::new(
            0.6,
            DVector::from_vec(vec![1.2, -0.4]),
            DMatrix::from_row_slice(2, 2, &[0.2, -0.05, -0.05, 0.4]),
        ),
    ])
    .expect("valid mixture")
}

/// Exact conditional draws of `x0` given `x_t`, a pCN move on the
/// endpoint, and re-interpolation at `t'`, compared with the analytic
/// posterior marginal at `t'`.
pub fn affine_combination(n_samples: usize, seed: u64) -> CheckResult {
    timed("affine-combination", || {
        let prior = two_component_prior();
        let meas = Measurement::new(
            DVector::from_vec(vec![0.35]),
            ForwardOperator::mask(2, vec![0])?,
            Decoder::Identity,
            0.1,
        )?;
        let posterior = prior.posterior_given_measurement(&meas)?;
        let mut details = Vec::new();
        let mut ok = true;
        for (k, &t_next) in [0.2, 0.5, 0.8].iter().enumerate() {
            let t = (t_next + 0.1_f64).min(1.0);
            let marginal = posterior.marginal_at(t)?;
            let mut rng = rng::derive(seed, "affine-combination", k as u64);
            let rho = RhoSchedule::SqrtOneMinusSigma.resolve(t_next);
            let samples = (0..n_samples)
                .map(|_| {
                    let x_t = marginal.sample_one(&mut rng);
                    let x0 = posterior.conditional_x0_given_xt(t, &x_t)?.sample_one(&mut rng);
                    let eps = standard_normal(&mut rng, 2);
                    let x1 = pcn_renoise(&eps, rho, &mut rng)?;
                    Ok(x0 * (1.0 - t_next) + x1 * t_next)
                })
                .collect::<Result<Vec<_>>>()?;
            let report = moment_distance(&samples, &posterior.marginal_at(t_next)?)?;
            ok &= report.within(3.0);
            details.push(format!("t'={t_next}: worst {:.2} SE", report.worst_z()));
        }
        Ok((ok, format!("{n_samples} samples; {}", details.join(", "))))
    })
}

/// Empirical covariance of a long Langevin chain on a Gaussian target
/// against the discrete Lyapunov solution.
pub fn ula_stationarity(n_iter: usize, seed: u64) -> CheckResult {
    timed("ula-stationarity", || {
        let (sigma_n, t, zeta) = (0.05, 0.5, 1e-3);
        let a = DMatrix::from_row_slice(2, 2, &[1.2, 0.3, 0.1, 1.0]);
        let meas = Measurement::new(DVector::from_vec(vec![0.4, -0.2]), ForwardOperator::dense(a.clone()), Decoder::Identity, sigma_n)?;
        let anchor = DVector::from_vec(vec![0.1, 0.3]);
        let precision = a.tr_mul(&a) / (sigma_n * sigma_n) + DMatrix::identity(2, 2) / t;
        let target = ula_stationary_covariance(&precision, zeta)?;
        let mut rng = rng::derive(seed, "ula-stationarity", 0);
        let burn_in = 2000;
        let mut z = langevin_phase(&meas, &anchor, &anchor, t, burn_in, zeta, &mut rng)?;
        let mut sum = DVector::zeros(2);
        let mut outer = DMatrix::zeros(2, 2);
        for _ in 0..n_iter {
            z = langevin_phase(&meas, &anchor, &z, t, 1, zeta, &mut rng)?;
            sum += &z;
            outer += &z * z.transpose();
        }
        let n = n_iter as f64;
        let mean = sum / n;
        let cov = (outer - &mean * mean.transpose() * n) / (n - 1.0);
        let rel = (&cov - &target).norm() / target.norm();
        let exact = precision.try_inverse().ok_or_else(|| Error::invalid("singular precision"))?;
        let bias = (&target - &exact).norm() / exact.norm();
        Ok((
            rel <= 0.05,
            format!("{n_iter} iterates, relative Frobenius error {rel:.4} (discretisation bias vs exact {bias:.4})"),
        ))
    })
}

/// pCN preserves `N(0, I)` for each `rho`.
pub fn pcn_moments(n_samples: usize, seed: u64) -> CheckResult {
    timed("pcn-moments", || {
        let target = GaussianMixture::standard_normal(2);
        let rhos = [0.0, 0.5, (1.0 - 3.0 / 43.0_f64).sqrt()];
        let mut ok = true;
        let mut details = Vec::new();
        for (k, &rho) in rhos.iter().enumerate() {
            let mut rng = rng::derive(seed, "pcn-moments", k as u64);
            let samples = (0..n_samples)
                .map(|_| pcn_renoise(&standard_normal(&mut rng, 2), rho, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            let report = moment_distance(&samples, &target)?;
            ok &= report.within(3.0);
            details.push(format!("rho={rho:.4}: worst {:.2} SE", report.worst_z()));
        }
        Ok((ok, format!("{n_samples} samples; {}", details.join(", "))))
    })
}

/// Metropolis-Hastings ratio of random pCN proposals equals one.
pub fn pcn_acceptance(n_proposals: usize, seed: u64) -> CheckResult {
    timed("pcn-acceptance", || {
        let mut rng = rng::derive(seed, "pcn-acceptance", 0);
        let mut worst: f64 = 0.0;
        for _ in 0..n_proposals {
            let rho: f64 = rng.random_range(0.0..0.999);
            let d = rng.random_range(1..=8);
            let old = standard_normal(&mut rng, d);
            let new = pcn_renoise(&old, rho, &mut rng)?;
            worst = worst.max((pcn_log_acceptance(&old, &new, rho).exp() - 1.0).abs());
        }
        Ok((worst <= 1e-12, format!("{n_proposals} proposals, max |ratio - 1| = {worst:.3e}")))
    })
}

fn one_d_priors() -> Vec<GaussianMixture> {
    let c = |w: f64, m: f64, v: f64| Component::isotropic(w, DVector::from_vec(vec![m]), v);
    vec![
        vec![c(1.0, 0.3, 0.5)],
        vec![c(0.3, -1.0, 0.2), c(0.7, 1.5, 0.4)],
        vec![c(0.2, -2.0, 0.1), c(0.5, 0.0, 0.3), c(0.3, 2.0, 0.6)],
    ]
    .into_iter()
    .map(|comps| GaussianMixture::new(comps).expect("valid mixture"))
    .collect()
}

/// Closed-form velocity against trapezoidal quadrature in 1D.
pub fn velocity_quadrature(n_points: usize, seed: u64) -> CheckResult {
    timed("velocity-quadrature", || {
        let mut rng = rng::derive(seed, "velocity-quadrature", 0);
        let mut worst: f64 = 0.0;
        for prior in one_d_priors() {
            let grid = default_velocity_grid(&prior, 8192);
            for _ in 0..n_points {
                let t = rng.random_range(0.05..0.95);
                let x = rng.random_range(-3.0..3.0);
                let closed = prior.velocity(t, &DVector::from_vec(vec![x]))?[0];
                worst = worst.max((closed - quadrature_velocity(&prior, t, x, &grid)?).abs());
            }
        }
        Ok((worst <= 1e-6, format!("K=1,2,3 x {n_points} points, max abs error {worst:.3e}")))
    })
}

/// With no Langevin or proximal iterations and `rho = 1` every flow step
/// reproduces the unconditional Euler step exactly.
pub fn collapse(seed: u64) -> CheckResult {
    timed("algorithmic-collapse", || {
        let prior = two_component_prior();
        let meas = Measurement::new(DVector::from_vec(vec![0.2]), ForwardOperator::mask(2, vec![1])?, Decoder::Identity, 0.05)?;
        let cfg = preset_unconditional(&LpsConfig::default());
        let sampler = Sampler::new(&prior, &meas, &cfg)?;
        let mut rng = rng::derive(seed, "collapse", 0);
        let mut state = sampler.initial_state(&mut rng);
        let euler = euler_trajectory(&prior, &state.z_t, cfg.n_steps, cfg.alpha)?;
        let mut mismatches = 0;
        for expected in &euler[1..] {
            state = sampler.flow_step(&state, &mut rng)?.0;
            if state.z_t != *expected {
                mismatches += 1;
            }
        }
        Ok((mismatches == 0, format!("{} steps, {mismatches} differ from Euler", cfg.n_steps)))
    })
}

/// Shipped defaults match the per-task hyperparameter table.
pub fn defaults() -> CheckResult {
    timed("default-hyperparameters", || {
        let mut problems = Vec::new();
        let d = LpsConfig::default();
        if d.zeta != 1e-4 || d.n_total != 15 || d.n_steps != 40 || d.pcn_steps != 1 {
            problems.push("base knobs".to_string());
        }
        if d.rho != RhoSchedule::SqrtOneMinusSigma {
            problems.push("rho schedule".into());
        }
        let table: [(TaskPreset, usize, usize, ProximalSolver); 5] = [
            (TaskPreset::BoxInpainting, 4, 3, ProximalSolver::GradientDescent { lr: 0.1, decay_factor: 0.65, decay_every: 10 }),
            (TaskPreset::RandomInpainting, 5, 3, ProximalSolver::GradientDescent { lr: 0.1, decay_factor: 0.65, decay_every: 10 }),
            (TaskPreset::GaussianDeblur, 6, 3, ProximalSolver::GradientDescent { lr: 0.1, decay_factor: 1.0, decay_every: 1 }),
            (TaskPreset::MotionDeblur, 6, 3, ProximalSolver::GradientDescent { lr: 0.1, decay_factor: 1.0, decay_every: 1 }),
            (TaskPreset::SuperResolution, 4, 5, ProximalSolver::GradientDescent { lr: 0.5, decay_factor: 0.85, decay_every: 5 }),
        ];
        for (task, nl, alpha, prox) in table {
            let c = LpsConfig::for_task(task);
            if c.n_langevin != LangevinSteps::Fixed(nl) || c.alpha != alpha || c.proximal != prox || c.zeta != 1e-4 || c.n_total != 15 {
                problems.push(task.as_str().into());
            }
            let end = *c.time_schedule().last().expect("nonempty");
            if end != alpha as f64 / (40 + alpha) as f64 {
                problems.push(format!("{} schedule end {end}", task.as_str()));
            }
        }
        if *time_schedule(40, 3).last().expect("nonempty") != 3.0 / 43.0 {
            problems.push("schedule end 3/43".into());
        }
        if d != LpsConfig::for_task(TaskPreset::RandomInpainting) {
            problems.push("default task".into());
        }
        Ok((problems.is_empty(), if problems.is_empty() { "table matches".into() } else { problems.join("; ") }))
    })
}

fn operator_zoo<R: Rng + ?Sized>(rng: &mut R) -> Result<Vec<(SignalShape, ForwardOperator)>> {
    let line = SignalShape::Line(12);
    let grid = SignalShape::Grid { height: 4, width: 6 };
    Ok(vec![
        (line, ForwardOperator::identity(12)),
        (line, ForwardOperator::random_mask(12, 0.5, rng)?),
        (line, ForwardOperator::gaussian_blur(line, 5, 1.0)?),
        (grid, ForwardOperator::gaussian_blur(grid, 3, 0.8)?),
        (line, ForwardOperator::downsample(line, 3)?),
        (grid, ForwardOperator::downsample(grid, 2)?),
        (line, ForwardOperator::dense(gaussian_matrix(5, 12, 0.4, rng))),
    ])
}

/// `<A x, u> = <x, A^T u>` for every operator kind.
pub fn adjoint_identities(pairs: usize, seed: u64) -> CheckResult {
    timed("adjoint-identities", || {
        let mut rng = rng::derive(seed, "adjoint", 0);
        let mut worst: f64 = 0.0;
        for (_, op) in operator_zoo(&mut rng)? {
            for _ in 0..pairs {
                let x = standard_normal(&mut rng, op.in_dim());
                let u = standard_normal(&mut rng, op.out_dim());
                let lhs = op.apply(&x)?.dot(&u);
                let rhs = x.dot(&op.adjoint(&u)?);
                worst = worst.max((lhs - rhs).abs() / (1.0 + lhs.abs()));
            }
        }
        Ok((worst <= 1e-10, format!("{pairs} pairs per operator, worst {worst:.3e}")))
    })
}

/// Data-fidelity gradient against central differences for every
/// operator and decoder.
pub fn fidelity_gradients(seed: u64) -> CheckResult {
    timed("fidelity-gradients", || {
        let mut rng = rng::derive(seed, "fidelity-gradients", 0);
        let mut worst: f64 = 0.0;
        for (_, op) in operator_zoo(&mut rng)? {
            let d = op.in_dim();
            for decoder in [Decoder::Identity, Decoder::random_smooth(d, 0.3, &mut rng)] {
                let y = standard_normal(&mut rng, op.out_dim());
                let meas = Measurement::new(y, op.clone(), decoder, 0.1)?;
                let z = standard_normal(&mut rng, d) * 0.5;
                let g = meas.data_fidelity_grad(&z)?;
                let fd = finite_difference_gradient(|v| meas.data_fidelity(v).unwrap_or(f64::NAN), &z, 1e-5)?;
                worst = worst.max((&g - &fd).norm() / (1.0 + g.norm()));
            }
        }
        Ok((worst <= 1e-6, format!("all operator/decoder pairs, worst relative error {worst:.3e}")))
    })
}

/// Conjugate posterior against a normalised 2D grid of prior times likelihood.
pub fn posterior_conjugacy() -> CheckResult {
    timed("posterior-conjugacy", || {
        let prior = two_component_prior();
        let sigma_n = 0.3;
        let a = DMatrix::from_row_slice(1, 2, &[0.8, -0.5]);
        let y = DVector::from_vec(vec![0.6]);
        let meas = Measurement::new(y.clone(), ForwardOperator::dense(a.clone()), Decoder::Identity, sigma_n)?;
        let posterior = prior.posterior_given_measurement(&meas)?;
        let axis = crate::oracle::uniform_grid(-5.0, 5.0, 801);
        let grid = GridDensity::from_log_fn(vec![axis.clone(), axis.clone()], |p| {
            let x = DVector::from_column_slice(p);
            let r = (&y - &a * &x)[0];
            prior.log_density(&x).unwrap_or(f64::NEG_INFINITY) - 0.5 * r * r / (sigma_n * sigma_n)
                - 0.5 * (2.0 * PI * sigma_n * sigma_n).ln()
        })?
        .normalized();
        let mut mean = DVector::zeros(2);
        let mut second = DMatrix::zeros(2, 2);
        for (idx, lv) in grid.log_values.iter().enumerate() {
            let x = DVector::from_vec(vec![axis[idx / axis.len()], axis[idx % axis.len()]]);
            let w = lv.exp() * grid.cell_volume;
            mean += &x * w;
            second += &x * x.transpose() * w;
        }
        let cov = second - &mean * mean.transpose();
        let err = (mean - posterior.mean()).amax().max((cov - posterior.covariance()).amax());
        Ok((err <= 1e-6, format!("max moment error {err:.3e}")))
    })
}

/// Every solver preset expands to a configuration the sampler accepts.
pub fn presets_validate() -> CheckResult {
    timed("presets-validate", || {
        let base = LpsConfig::default();
        let bad: Vec<String> = SolverKind::ALL
            .iter()
            .filter_map(|&k| crate::baselines::expand(k, &base).map(|c| (k, c)))
            .filter(|(_, c)| c.validate().is_err())
            .map(|(k, _)| k.to_string())
            .collect();
        Ok((bad.is_empty(), if bad.is_empty() { "all presets valid".into() } else { bad.join(", ") }))
    })
}

pub fn run_checks(level: Level) -> Vec<CheckResult> {
    let seed = 0;
    let mut out = vec![
        defaults(),
        presets_validate(),
        adjoint_identities(100, seed),
        fidelity_gradients(seed),
        posterior_conjugacy(),
        proximal_equivalence(100, seed),
        velocity_quadrature(20, seed),
        collapse(seed),
        pcn_acceptance(1000, seed),
    ];
    if level == Level::Full {
        out.push(pcn_moments(100_000, seed));
        out.push(ula_stationarity(100_000, seed));
        out.push(affine_combination(100_000, seed));
    }
    out
}

/// Runs the suite, writing one JSON object per check to `sink`.
/// Returns whether every check passed.
pub fn verify_suite<W: Write>(level: Level, sink: &mut W) -> Result<bool> {
    let mut all = true;
    for result in run_checks(level) {
        all &= result.passed;
        serde_json::to_writer(&mut *sink, &result)?;
        sink.write_all(b"\n")?;
    }
    Ok(all)
}
