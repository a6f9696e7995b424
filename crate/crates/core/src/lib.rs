//! Langevin-proximal posterior sampling for rectified-flow priors.
//!
//! The prior is a Gaussian mixture over a latent space, which makes the
//! rectified-flow velocity, the Tweedie estimates and every conditional
//! distribution available in closed form. The sampler alternates a
//! Langevin anchoring chain with a proximal mode-seeking solve at every
//! Euler step, and re-noises the predicted endpoint with a single
//! preconditioned Crank-Nicolson move.
//!
//! Module map:
//! - [`prior`]: Gaussian mixtures and their flow marginals, velocity,
//!   conditionals, posteriors and EM fitting.
//! - [`forward`]: linear measurement operators, decoders, measurements.
//! - [`sampler`]: the per-step state machine and the full solve loop.
//! - [`baselines`]: reference solvers expressed as presets plus a
//!   single-gradient guidance solver.
//! - [`oracle`]: brute-force verifiers used by the tests and `verify`.
//! - [`harness`]: configuration, datasets, metrics, benchmarks and
//!   artifact emission.

// `!(x > 0.0)` is used on purpose so that NaN is rejected.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baselines;
pub mod error;
pub mod forward;
pub mod harness;
pub mod linalg;
pub mod oracle;
pub mod prior;
pub mod rng;
pub mod sampler;

pub use error::{Error, Result};
pub use forward::{Decoder, ForwardOperator, Measurement, SignalShape};
pub use prior::{Component, GaussianMixture, TweediePair};
pub use sampler::{LangevinSteps, LpsConfig, ProximalSolver, RhoSchedule};
