//! Reference solvers.
//!
//! Pure proximal, pure Langevin and unconditional sampling are the same
//! state machine with a different configuration. The single-gradient
//! solver is structurally different: one gradient step on the Tweedie
//! estimate per flow step, then deterministic re-interpolation.

use std::fmt;
use std::str::FromStr;

use nalgebra::DVector;

use crate::forward::Measurement;
use crate::prior::{GaussianMixture, TweediePair};
use crate::rng::{self, standard_normal};
use crate::sampler::{
    interpolate, solve, solve_with_truth, time_schedule, LangevinSteps, LpsConfig, RhoSchedule, Solution,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum SolverKind {
    FlowLps,
    PureProximal,
    PureLangevin,
    SingleGradient,
    Unconditional,
}

impl SolverKind {
    pub const ALL: [SolverKind; 5] = [
        SolverKind::FlowLps,
        SolverKind::PureProximal,
        SolverKind::PureLangevin,
        SolverKind::SingleGradient,
        SolverKind::Unconditional,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            SolverKind::FlowLps => "flowlps",
            SolverKind::PureProximal => "pure-proximal",
            SolverKind::PureLangevin => "pure-langevin",
            SolverKind::SingleGradient => "single-gradient",
            SolverKind::Unconditional => "unconditional",
        }
    }
}

impl fmt::Display for SolverKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SolverKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SolverKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown solver `{s}`")))
    }
}

/// `N_L = 0`; the whole budget goes to the proximal solve.
pub fn preset_pure_proximal(base: &LpsConfig) -> LpsConfig {
    LpsConfig { n_langevin: LangevinSteps::Fixed(0), ..base.clone() }
}

/// `N_L = N_P`, no proximal iterations, full re-noising (`rho = 0`).
pub fn preset_pure_langevin(base: &LpsConfig) -> LpsConfig {
    LpsConfig {
        n_langevin: LangevinSteps::Fixed(base.n_total),
        rho: RhoSchedule::Zero,
        ..base.clone()
    }
}

/// Plain Euler sampling of the prior: no Langevin, no proximal, `rho = 1`.
pub fn preset_unconditional(base: &LpsConfig) -> LpsConfig {
    LpsConfig {
        n_langevin: LangevinSteps::Fixed(0),
        n_total: 0,
        rho: RhoSchedule::Const(1.0),
        ..base.clone()
    }
}

/// Sampler configuration for a preset; `None` for the single-gradient solver.
pub fn expand(kind: SolverKind, base: &LpsConfig) -> Option<LpsConfig> {
    match kind {
        SolverKind::FlowLps => Some(base.clone()),
        SolverKind::PureProximal => Some(preset_pure_proximal(base)),
        SolverKind::PureLangevin => Some(preset_pure_langevin(base)),
        SolverKind::Unconditional => Some(preset_unconditional(base)),
        SolverKind::SingleGradient => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GuidanceConfig {
    pub n_steps: usize,
    pub alpha: usize,
    /// Gradient step on `||y - A D(x0)||^2`; zero gives the unconditional ODE.
    pub step_size: f64,
    pub seed: u64,
}

impl GuidanceConfig {
    pub fn from_lps(cfg: &LpsConfig, step_size: f64) -> Self {
        Self { n_steps: cfg.n_steps, alpha: cfg.alpha, step_size, seed: cfg.seed }
    }
}

/// One gradient update of the Tweedie estimate per flow step, then
/// re-interpolation with the model-predicted noise.
pub fn single_gradient_solve(
    meas: &Measurement,
    prior: &GaussianMixture,
    cfg: &GuidanceConfig,
) -> Result<DVector<f64>> {
    Ok(single_gradient_run(meas, prior, cfg)?.1)
}

/// States visited and the final decoded estimate.
pub fn single_gradient_run(
    meas: &Measurement,
    prior: &GaussianMixture,
    cfg: &GuidanceConfig,
) -> Result<(Vec<DVector<f64>>, DVector<f64>)> {
    if !(cfg.step_size >= 0.0) {
        return Err(Error::invalid("guidance step size must be nonnegative"));
    }
    if cfg.n_steps == 0 {
        return Err(Error::invalid("n_steps must be at least 1"));
    }
    if prior.dim() != meas.latent_dim() {
        return Err(Error::dims("prior vs operator input", meas.latent_dim(), prior.dim()));
    }
    let mut rng = rng::derive(cfg.seed, rng::role::SAMPLER, 0);
    let mut z = standard_normal(&mut rng, prior.dim());
    let mut states = vec![z.clone()];
    let mut x0 = z.clone();
    for w in time_schedule(cfg.n_steps, cfg.alpha).windows(2) {
        let v = prior.velocity(w[0], &z)?;
        let pair = TweediePair::from_velocity(w[0], &z, &v);
        x0 = pair.x0_hat;
        if cfg.step_size > 0.0 {
            let g = meas.data_fidelity_grad(&x0)?;
            x0.axpy(-cfg.step_size, &g, 1.0);
        }
        z = interpolate(&x0, &pair.x1_hat, w[1]);
        states.push(z.clone());
    }
    Ok((states, meas.decoder.decode(&x0)?))
}

/// Runs any solver kind. `guidance_step` is only read by the single-gradient solver.
pub fn run_solver(
    kind: SolverKind,
    meas: &Measurement,
    prior: &GaussianMixture,
    base: &LpsConfig,
    guidance_step: f64,
    truth: Option<&DVector<f64>>,
) -> Result<SolverOutput> {
    match expand(kind, base) {
        Some(cfg) => {
            let sol = match truth {
                Some(x) => solve_with_truth(meas, prior, &cfg, x)?,
                None => solve(meas, prior, &cfg)?,
            };
            Ok(SolverOutput { reconstruction: sol.reconstruction.clone(), solution: Some(sol) })
        }
        None => {
            let g = GuidanceConfig::from_lps(base, guidance_step);
            Ok(SolverOutput { reconstruction: single_gradient_solve(meas, prior, &g)?, solution: None })
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolverOutput {
    pub reconstruction: DVector<f64>,
    /// Full sampler output, absent for the single-gradient solver.
    pub solution: Option<Solution>,
}
