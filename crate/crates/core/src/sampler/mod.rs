//! The Langevin-proximal flow sampler.
//!
//! Each flow step at time `t` evaluates the velocity once, splits `z_t`
//! into its Tweedie endpoints, re-noises the predicted noise with a pCN
//! move, refines the clean estimate with a Langevin chain anchored at the
//! Tweedie estimate, solves the proximal problem from the refined anchor,
//! and re-interpolates to `t - dt`.

mod config;
mod phases;

use nalgebra::DVector;
use rand::Rng;
use serde::{Deserialize, Serialize};

pub use config::{time_schedule, LangevinSteps, LpsConfig, ProximalSolver, RhoSchedule, TaskPreset};
pub use phases::{
    conjugate_gradient, exact_ridge, gradient_descent, langevin_drift, langevin_phase, pcn_log_acceptance,
    pcn_renoise, proximal_lambda, proximal_objective, proximal_phase,
};

use crate::forward::Measurement;
use crate::prior::{GaussianMixture, TweediePair};
use crate::rng::{self, standard_normal};
use crate::{Error, Result};

/// Sampler state at the start of a flow step.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplerState {
    pub t: f64,
    pub z_t: DVector<f64>,
    /// Latest clean-signal estimate (the proximal solution once a step ran).
    pub x0_anchor: DVector<f64>,
    /// Re-noised endpoint used for the last interpolation.
    pub x1_hat: DVector<f64>,
    pub step_index: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Tweedie,
    Pcn,
    Langevin,
    Proximal,
    Interp,
}

/// Diagnostics for one phase.
///
/// `residual_sq` is `||y - A D(z)||^2` of the phase output `z` (the clean
/// estimate for tweedie/pcn/langevin/proximal, the new state for interp).
/// `anchor_dist_sq` measures how far the phase moved its input: 0 for
/// tweedie, `||eps - x1_hat||^2` for pcn, distance to the Tweedie anchor
/// for langevin, to the Langevin output for proximal, and to the proximal
/// solution for interp.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseRecord {
    pub phase: Phase,
    pub residual_sq: f64,
    pub anchor_dist_sq: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub mse_true: Option<f64>,
}

/// All phase records of one flow step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    pub t: f64,
    pub phases: Vec<PhaseRecord>,
}

#[derive(Debug, Clone)]
pub struct Solution {
    /// `D(z*)` for the last proximal solution.
    pub reconstruction: DVector<f64>,
    pub latent: DVector<f64>,
    pub final_state: SamplerState,
    pub trajectory: Vec<StepRecord>,
}

/// Borrowed problem data for a run.
pub struct Sampler<'a> {
    prior: &'a GaussianMixture,
    meas: &'a Measurement,
    cfg: &'a LpsConfig,
    truth: Option<&'a DVector<f64>>,
    schedule: Vec<f64>,
}

impl<'a> Sampler<'a> {
    pub fn new(prior: &'a GaussianMixture, meas: &'a Measurement, cfg: &'a LpsConfig) -> Result<Self> {
        cfg.validate()?;
        if meas.operator.out_dim() == 0 {
            return Err(Error::invalid("measurement is empty; nothing to condition on"));
        }
        if prior.dim() != meas.latent_dim() {
            return Err(Error::dims("prior vs operator input", meas.latent_dim(), prior.dim()));
        }
        if cfg.n_langevin.max() > 0 && !(meas.sigma_n > 0.0) {
            return Err(Error::invalid("Langevin steps need sigma_n > 0"));
        }
        Ok(Self { prior, meas, cfg, truth: None, schedule: cfg.time_schedule() })
    }

    /// Ground truth in signal space, used only for the `mse_true` diagnostics.
    pub fn with_truth(mut self, truth: &'a DVector<f64>) -> Self {
        self.truth = Some(truth);
        self
    }

    pub fn schedule(&self) -> &[f64] {
        &self.schedule
    }

    pub fn initial_state<R: Rng + ?Sized>(&self, rng: &mut R) -> SamplerState {
        let z = standard_normal(rng, self.prior.dim());
        SamplerState {
            t: 1.0,
            x0_anchor: z.clone(),
            x1_hat: z.clone(),
            z_t: z,
            step_index: 0,
        }
    }

    fn record(&self, phase: Phase, z: &DVector<f64>, reference: &DVector<f64>) -> Result<PhaseRecord> {
        let decoded = self.meas.decoder.decode(z)?;
        let residual_sq = (&self.meas.y - self.meas.operator.apply(&decoded)?).norm_squared();
        let mse_true = self
            .truth
            .map(|x| (&decoded - x).norm_squared() / x.len() as f64);
        Ok(PhaseRecord {
            phase,
            residual_sq,
            anchor_dist_sq: (z - reference).norm_squared(),
            mse_true,
        })
    }

    /// One pass of the per-step state machine.
    pub fn flow_step<R: Rng + ?Sized>(&self, state: &SamplerState, rng: &mut R) -> Result<(SamplerState, StepRecord)> {
        let i = state.step_index;
        if i >= self.cfg.n_steps {
            return Err(Error::invalid(format!("step {i} past the end of a {}-step schedule", self.cfg.n_steps)));
        }
        let t = state.t;
        if !(t > 0.0) {
            return Err(Error::invalid("flow step needs t > 0"));
        }
        let t_next = self.schedule[i + 1];

        let v = self.prior.velocity(t, &state.z_t)?;
        let TweediePair { x0_hat, x1_hat, .. } = TweediePair::from_velocity(t, &state.z_t, &v);
        let mut phases = Vec::with_capacity(5);
        phases.push(self.record(Phase::Tweedie, &x0_hat, &x0_hat)?);

        let rho = self.cfg.rho.resolve(t_next);
        let mut eps = x1_hat.clone();
        for _ in 0..self.cfg.pcn_steps {
            eps = pcn_renoise(&eps, rho, rng)?;
        }
        let mut pcn = self.record(Phase::Pcn, &x0_hat, &x0_hat)?;
        pcn.anchor_dist_sq = (&eps - &x1_hat).norm_squared();
        phases.push(pcn);

        let n_lang = self.cfg.langevin_at(i);
        let anchor = langevin_phase(self.meas, &x0_hat, &x0_hat, t, n_lang, self.cfg.zeta, rng)?;
        phases.push(self.record(Phase::Langevin, &anchor, &x0_hat)?);

        let z_star = proximal_phase(self.meas, &anchor, t, &self.cfg.proximal, self.cfg.proximal_at(i))?;
        phases.push(self.record(Phase::Proximal, &z_star, &anchor)?);

        let z_next = interpolate(&z_star, &eps, t_next);
        phases.push(self.record(Phase::Interp, &z_next, &z_star)?);

        Ok((
            SamplerState { t: t_next, z_t: z_next, x0_anchor: z_star, x1_hat: eps, step_index: i + 1 },
            StepRecord { step: i, t, phases },
        ))
    }

    /// Runs every step from a given initial state.
    pub fn run_from<R: Rng + ?Sized>(&self, init: SamplerState, rng: &mut R) -> Result<Solution> {
        let mut state = init;
        let mut trajectory = Vec::with_capacity(self.cfg.n_steps);
        while state.step_index < self.cfg.n_steps {
            let (next, rec) = self.flow_step(&state, rng)?;
            trajectory.push(rec);
            state = next;
        }
        Ok(Solution {
            reconstruction: self.meas.decoder.decode(&state.x0_anchor)?,
            latent: state.x0_anchor.clone(),
            final_state: state,
            trajectory,
        })
    }

    pub fn run(&self) -> Result<Solution> {
        let mut rng = rng::derive(self.cfg.seed, rng::role::SAMPLER, 0);
        let init = self.initial_state(&mut rng);
        self.run_from(init, &mut rng)
    }
}

/// `(1 - s) x0 + s x1`.
pub fn interpolate(x0: &DVector<f64>, x1: &DVector<f64>, s: f64) -> DVector<f64> {
    x0 * (1.0 - s) + x1 * s
}

/// Runs the full sampler; the reconstruction is the decoded last proximal
/// solution rather than the state at `t = 0`.
pub fn solve(meas: &Measurement, prior: &GaussianMixture, cfg: &LpsConfig) -> Result<Solution> {
    Sampler::new(prior, meas, cfg)?.run()
}

/// Like [`solve`] but also logs the reconstruction error against `truth`.
pub fn solve_with_truth(
    meas: &Measurement,
    prior: &GaussianMixture,
    cfg: &LpsConfig,
    truth: &DVector<f64>,
) -> Result<Solution> {
    Sampler::new(prior, meas, cfg)?.with_truth(truth).run()
}

/// Unconditional Euler trajectory written as re-interpolation of the
/// Tweedie pair: `z_{t'} = (1 - t') E[x0|z_t] + t' E[x1|z_t]`.
pub fn euler_trajectory(
    prior: &GaussianMixture,
    z1: &DVector<f64>,
    n_steps: usize,
    alpha: usize,
) -> Result<Vec<DVector<f64>>> {
    let schedule = time_schedule(n_steps, alpha);
    let mut states = vec![z1.clone()];
    for w in schedule.windows(2) {
        let z = states.last().unwrap();
        let v = prior.velocity(w[0], z)?;
        let pair = TweediePair::from_velocity(w[0], z, &v);
        states.push(interpolate(&pair.x0_hat, &pair.x1_hat, w[1]));
    }
    Ok(states)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::{simulate_measurement, Decoder, ForwardOperator};
    use crate::prior::Component;

    fn toy_prior() -> GaussianMixture {
        GaussianMixture::new(vec![
            Component::isotropic(0.4, DVector::from_vec(vec![-1.0, 0.5]), 0.2),
            Component::isotropic(0.6, DVector::from_vec(vec![1.0, -0.5]), 0.3),
        ])
        .unwrap()
    }

    fn collapsed(mut cfg: LpsConfig) -> LpsConfig {
        cfg.n_langevin = LangevinSteps::Fixed(0);
        cfg.n_total = 0;
        cfg.rho = RhoSchedule::Const(1.0);
        cfg
    }

    #[test]
    fn collapsed_step_is_euler() {
        let prior = toy_prior();
        let meas = Measurement::new(DVector::zeros(1), ForwardOperator::mask(2, vec![0]).unwrap(), Decoder::Identity, 0.1).unwrap();
        let cfg = collapsed(LpsConfig::default());
        let sampler = Sampler::new(&prior, &meas, &cfg).unwrap();
        let mut r = rng::derive(1, "s", 0);
        let s0 = sampler.initial_state(&mut r);
        let (s1, _) = sampler.flow_step(&s0, &mut r).unwrap();
        let v = prior.velocity(1.0, &s0.z_t).unwrap();
        let euler = &s0.z_t - v * (1.0 / 43.0);
        assert!((&s1.z_t - euler).amax() < 1e-12);
    }

    #[test]
    fn noiseless_identity_pins_solution() {
        let prior = toy_prior();
        let truth = DVector::from_vec(vec![0.7, -0.2]);
        let meas = simulate_measurement(&truth, &ForwardOperator::identity(2), &Decoder::Identity, 1e-4, &mut rng::derive(3, "n", 0)).unwrap();
        let cfg = LpsConfig { n_langevin: LangevinSteps::Fixed(0), proximal: ProximalSolver::ExactRidge, ..LpsConfig::default() };
        let sampler = Sampler::new(&prior, &meas, &cfg).unwrap();
        let mut r = rng::derive(4, "s", 0);
        let s0 = sampler.initial_state(&mut r);
        let (s1, _) = sampler.flow_step(&s0, &mut r).unwrap();
        assert!((&s1.x0_anchor - &meas.y).amax() < 1e-3);
    }

    #[test]
    fn empty_measurement_rejected() {
        let prior = toy_prior();
        let meas = Measurement::new(DVector::zeros(0), ForwardOperator::mask(2, vec![]).unwrap(), Decoder::Identity, 0.1).unwrap();
        assert!(matches!(solve(&meas, &prior, &LpsConfig::default()), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn defaults_emit_one_record_per_step() {
        let prior = toy_prior();
        let meas = simulate_measurement(
            &DVector::from_vec(vec![1.0, -0.4]),
            &ForwardOperator::mask(2, vec![1]).unwrap(),
            &Decoder::Identity,
            0.03,
            &mut rng::derive(5, "n", 0),
        )
        .unwrap();
        let cfg = LpsConfig { n_langevin: LangevinSteps::Fixed(6), ..LpsConfig::default() };
        let sol = solve(&meas, &prior, &cfg).unwrap();
        assert_eq!(sol.trajectory.len(), 40);
        assert!(sol.trajectory.iter().all(|s| s.phases.len() == 5));
        assert!((sol.final_state.t - 3.0 / 43.0).abs() < 1e-15);
        assert!(sol.reconstruction.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn seeded_runs_are_bit_identical() {
        let prior = toy_prior();
        let meas = simulate_measurement(
            &DVector::from_vec(vec![1.0, -0.4]),
            &ForwardOperator::identity(2),
            &Decoder::Identity,
            0.05,
            &mut rng::derive(6, "n", 0),
        )
        .unwrap();
        let cfg = LpsConfig { seed: 99, ..LpsConfig::default() };
        let a = solve(&meas, &prior, &cfg).unwrap();
        let b = solve(&meas, &prior, &cfg).unwrap();
        assert_eq!(a.final_state, b.final_state);
        assert_eq!(a.trajectory, b.trajectory);
        let c = solve(&meas, &prior, &LpsConfig { seed: 100, ..cfg }).unwrap();
        assert_ne!(a.final_state, c.final_state);
    }
}
