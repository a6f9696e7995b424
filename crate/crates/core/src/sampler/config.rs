use crate::{Error, Result};

/// Langevin step count per flow step.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LangevinSteps {
    Fixed(usize),
    /// Linear interpolation from `start` at the first flow step to `end` at the last.
    LinearDecay { start: usize, end: usize },
}

impl LangevinSteps {
    pub fn max(&self) -> usize {
        match *self {
            LangevinSteps::Fixed(k) => k,
            LangevinSteps::LinearDecay { start, end } => start.max(end),
        }
    }

    /// Steps to run at flow step `step_index` of `n_steps`.
    pub fn resolve(&self, step_index: usize, n_steps: usize) -> usize {
        match *self {
            LangevinSteps::Fixed(k) => k,
            LangevinSteps::LinearDecay { start, end } => {
                if n_steps <= 1 {
                    return start;
                }
                let frac = step_index.min(n_steps - 1) as f64 / (n_steps - 1) as f64;
                (start as f64 + (end as f64 - start as f64) * frac).round() as usize
            }
        }
    }
}

/// Mixing coefficient of the pCN re-noising move, as a function of the
/// time being stepped to (`sigma_t = t` for rectified flow).
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RhoSchedule {
    Zero,
    Const(f64),
    OneMinusSigma,
    SqrtOneMinusSigma,
}

impl RhoSchedule {
    pub fn resolve(&self, t_next: f64) -> f64 {
        match *self {
            RhoSchedule::Zero => 0.0,
            RhoSchedule::Const(c) => c,
            RhoSchedule::OneMinusSigma => 1.0 - t_next,
            RhoSchedule::SqrtOneMinusSigma => (1.0 - t_next).sqrt(),
        }
    }

    pub fn label(&self) -> String {
        match *self {
            RhoSchedule::Zero => "zero".into(),
            RhoSchedule::Const(c) => format!("const({c})"),
            RhoSchedule::OneMinusSigma => "one-minus-sigma".into(),
            RhoSchedule::SqrtOneMinusSigma => "sqrt-one-minus-sigma".into(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ProximalSolver {
    /// Direct normal-equation solve; linear operator and identity decoder only.
    ExactRidge,
    ConjugateGradient { tol: f64, max_iter: usize },
    /// Plain gradient descent with step decay `lr * decay_factor^(k / decay_every)`,
    /// the decay counter restarting at every flow step.
    GradientDescent { lr: f64, decay_factor: f64, decay_every: usize },
}

impl ProximalSolver {
    pub fn label(&self) -> &'static str {
        match self {
            ProximalSolver::ExactRidge => "exact-ridge",
            ProximalSolver::ConjugateGradient { .. } => "conjugate-gradient",
            ProximalSolver::GradientDescent { .. } => "gradient-descent",
        }
    }
}

/// Per-task hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TaskPreset {
    BoxInpainting,
    RandomInpainting,
    GaussianDeblur,
    MotionDeblur,
    SuperResolution,
}

impl TaskPreset {
    pub const ALL: [TaskPreset; 5] = [
        TaskPreset::BoxInpainting,
        TaskPreset::RandomInpainting,
        TaskPreset::GaussianDeblur,
        TaskPreset::MotionDeblur,
        TaskPreset::SuperResolution,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            TaskPreset::BoxInpainting => "box-inpainting",
            TaskPreset::RandomInpainting => "random-inpainting",
            TaskPreset::GaussianDeblur => "gaussian-deblur",
            TaskPreset::MotionDeblur => "motion-deblur",
            TaskPreset::SuperResolution => "super-resolution",
        }
    }

    pub fn n_langevin(&self) -> usize {
        match self {
            TaskPreset::BoxInpainting | TaskPreset::SuperResolution => 4,
            TaskPreset::RandomInpainting => 5,
            TaskPreset::GaussianDeblur | TaskPreset::MotionDeblur => 6,
        }
    }

    pub fn alpha(&self) -> usize {
        match self {
            TaskPreset::SuperResolution => 5,
            _ => 3,
        }
    }

    pub fn proximal(&self) -> ProximalSolver {
        match self {
            TaskPreset::SuperResolution => {
                ProximalSolver::GradientDescent { lr: 0.5, decay_factor: 0.85, decay_every: 5 }
            }
            TaskPreset::BoxInpainting | TaskPreset::RandomInpainting => {
                ProximalSolver::GradientDescent { lr: 0.1, decay_factor: 0.65, decay_every: 10 }
            }
            // no decay schedule is given for deblurring
            TaskPreset::GaussianDeblur | TaskPreset::MotionDeblur => {
                ProximalSolver::GradientDescent { lr: 0.1, decay_factor: 1.0, decay_every: 1 }
            }
        }
    }
}

impl std::str::FromStr for TaskPreset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        TaskPreset::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown task preset `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpsConfig {
    /// Flow steps actually taken.
    pub n_steps: usize,
    /// Truncation offset: the grid has `n_steps + alpha` intervals.
    pub alpha: usize,
    pub n_langevin: LangevinSteps,
    /// Combined Langevin + proximal iteration budget per flow step.
    pub n_total: usize,
    pub zeta: f64,
    pub rho: RhoSchedule,
    pub pcn_steps: usize,
    pub proximal: ProximalSolver,
    pub seed: u64,
}

impl Default for LpsConfig {
    fn default() -> Self {
        Self::for_task(TaskPreset::RandomInpainting)
    }
}

impl LpsConfig {
    pub fn for_task(task: TaskPreset) -> Self {
        Self {
            n_steps: 40,
            alpha: task.alpha(),
            n_langevin: LangevinSteps::Fixed(task.n_langevin()),
            n_total: 15,
            zeta: 1e-4,
            rho: RhoSchedule::SqrtOneMinusSigma,
            pcn_steps: 1,
            proximal: task.proximal(),
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::invalid("n_steps must be at least 1"));
        }
        if self.n_langevin.max() > self.n_total {
            return Err(Error::invalid(format!(
                "Langevin steps {} exceed the total budget {}",
                self.n_langevin.max(),
                self.n_total
            )));
        }
        if !(self.zeta > 0.0) || !self.zeta.is_finite() {
            return Err(Error::invalid("Langevin step size must be positive"));
        }
        if let RhoSchedule::Const(c) = self.rho {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::invalid(format!("constant rho {c} outside [0, 1]")));
            }
        }
        match self.proximal {
            ProximalSolver::ExactRidge => {}
            ProximalSolver::ConjugateGradient { tol, max_iter } => {
                if !(tol > 0.0) || max_iter == 0 {
                    return Err(Error::invalid("conjugate gradient needs tol > 0 and max_iter > 0"));
                }
            }
            ProximalSolver::GradientDescent { lr, decay_factor, decay_every } => {
                if !(lr > 0.0) || !(decay_factor > 0.0) || decay_every == 0 {
                    return Err(Error::invalid(
                        "gradient descent needs lr > 0, decay_factor > 0, decay_every > 0",
                    ));
                }
            }
        }
        Ok(())
    }

    pub fn time_schedule(&self) -> Vec<f64> {
        time_schedule(self.n_steps, self.alpha)
    }

    /// Langevin steps at flow step `step_index`.
    pub fn langevin_at(&self, step_index: usize) -> usize {
        self.n_langevin.resolve(step_index, self.n_steps)
    }

    /// Proximal iterations left in the budget at flow step `step_index`.
    pub fn proximal_at(&self, step_index: usize) -> usize {
        self.n_total.saturating_sub(self.langevin_at(step_index))
    }
}

/// `t_i = 1 - i / (n + alpha)` for `i = 0..=n`.
pub fn time_schedule(n_steps: usize, alpha: usize) -> Vec<f64> {
    let total = (n_steps + alpha) as f64;
    (0..=n_steps)
        .map(|i| (n_steps + alpha - i) as f64 / total)
        .collect()
}
