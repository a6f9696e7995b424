//! Experiment configuration read from TOML.
//!
//! Every key is optional; see `docs/experiment.toml` for the full schema
//! with defaults.

use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::baselines::{expand, SolverKind};
use crate::forward::SignalShape;
use crate::harness::dataset::MAX_DIM;
use crate::prior::{Component, GaussianMixture};
use crate::sampler::{LangevinSteps, LpsConfig, ProximalSolver, RhoSchedule, TaskPreset};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub instances: usize,
    pub out: PathBuf,
    pub peak: f64,
    /// Record wall-clock time; off by default so outputs are byte-reproducible.
    pub timing: bool,
    /// Instances (from index 0) that get trajectory logs and renders.
    pub artifacts: usize,
    pub sigma_n: f64,
    pub solver: String,
    /// Step size of the single-gradient baseline.
    pub guidance_step: f64,
    pub data: DataSpec,
    pub prior: PriorSpec,
    pub operator: OperatorSpec,
    pub decoder: DecoderSpec,
    pub lps: LpsSpec,
    pub sweep: SweepSpec,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            instances: 50,
            out: PathBuf::from("out"),
            peak: 1.0,
            timing: false,
            artifacts: 4,
            sigma_n: 0.03,
            solver: SolverKind::FlowLps.as_str().into(),
            guidance_step: 0.1,
            data: DataSpec::default(),
            prior: PriorSpec::default(),
            operator: OperatorSpec::default(),
            decoder: DecoderSpec::default(),
            lps: LpsSpec::default(),
            sweep: SweepSpec::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSpec {
    /// `[n]` for a line signal, `[height, width]` for a grid.
    pub shape: Vec<usize>,
    pub templates: usize,
}

impl Default for DataSpec {
    fn default() -> Self {
        Self { shape: vec![32], templates: 3 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PriorSource {
    /// The generating mixture of the dataset.
    True,
    /// Components listed under `prior.components`.
    Inline,
    /// A prior file at `prior.path`.
    File,
    /// EM fit on training samples.
    FitEm,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PriorSpec {
    pub source: PriorSource,
    pub path: Option<PathBuf>,
    pub components: Vec<ComponentFile>,
    /// Mixture size for `fit_em`.
    pub k: usize,
    /// Training set size for `fit_em` when `path` is unset.
    pub train_samples: usize,
}

impl Default for PriorSpec {
    fn default() -> Self {
        Self { source: PriorSource::True, path: None, components: Vec::new(), k: 3, train_samples: 500 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MaskKeep {
    Fraction(f64),
    Indices(Vec<usize>),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OperatorKind {
    Identity,
    Mask,
    Blur,
    Downsample,
    Dense,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OperatorSpec {
    pub kind: OperatorKind,
    /// Fraction of coordinates observed (fresh random mask per instance) or a fixed index list.
    pub mask_keep: MaskKeep,
    pub kernel_sigma: f64,
    pub kernel_size: usize,
    pub factor: usize,
    /// Rows of a random dense operator.
    pub rows: usize,
}

impl Default for OperatorSpec {
    fn default() -> Self {
        Self {
            kind: OperatorKind::Mask,
            mask_keep: MaskKeep::Fraction(0.3),
            kernel_sigma: 1.0,
            kernel_size: 5,
            factor: 2,
            rows: 8,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecoderKind {
    Identity,
    Smooth,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecoderSpec {
    pub kind: DecoderKind,
    pub gain: f64,
}

impl Default for DecoderSpec {
    fn default() -> Self {
        Self { kind: DecoderKind::Identity, gain: 0.1 }
    }
}

/// `5` or `{ start = 6, end = 1 }`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LangevinSpec {
    Fixed(usize),
    Decay { start: usize, end: usize },
}

impl From<LangevinSpec> for LangevinSteps {
    fn from(s: LangevinSpec) -> Self {
        match s {
            LangevinSpec::Fixed(k) => LangevinSteps::Fixed(k),
            LangevinSpec::Decay { start, end } => LangevinSteps::LinearDecay { start, end },
        }
    }
}

/// A constant in `[0, 1]` or one of `zero`, `one-minus-sigma`, `sqrt-one-minus-sigma`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RhoSpec {
    Const(f64),
    Named(String),
}

impl RhoSpec {
    pub fn resolve(&self) -> Result<RhoSchedule> {
        match self {
            RhoSpec::Const(c) if *c == 0.0 => Ok(RhoSchedule::Zero),
            RhoSpec::Const(c) => Ok(RhoSchedule::Const(*c)),
            RhoSpec::Named(n) => match n.as_str() {
                "zero" => Ok(RhoSchedule::Zero),
                "one-minus-sigma" => Ok(RhoSchedule::OneMinusSigma),
                "sqrt-one-minus-sigma" => Ok(RhoSchedule::SqrtOneMinusSigma),
                other => Err(Error::Config(format!("unknown rho schedule `{other}`"))),
            },
        }
    }
}

/// Overrides applied on top of the task preset.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LpsSpec {
    pub task: Option<String>,
    pub n_steps: Option<usize>,
    pub alpha: Option<usize>,
    pub n_langevin: Option<LangevinSpec>,
    pub n_total: Option<usize>,
    pub zeta: Option<f64>,
    pub rho: Option<RhoSpec>,
    pub pcn_steps: Option<usize>,
    /// `exact-ridge`, `conjugate-gradient` or `gradient-descent`.
    pub proximal: Option<String>,
    pub lr: Option<f64>,
    pub decay_factor: Option<f64>,
    pub decay_every: Option<usize>,
    pub cg_tol: Option<f64>,
    pub cg_max_iter: Option<usize>,
}

impl LpsSpec {
    pub fn resolve(&self) -> Result<LpsConfig> {
        let task = match &self.task {
            Some(t) => TaskPreset::from_str(t)?,
            None => TaskPreset::RandomInpainting,
        };
        let mut cfg = LpsConfig::for_task(task);
        if let Some(v) = self.n_steps {
            cfg.n_steps = v;
        }
        if let Some(v) = self.alpha {
            cfg.alpha = v;
        }
        if let Some(v) = self.n_langevin {
            cfg.n_langevin = v.into();
        }
        if let Some(v) = self.n_total {
            cfg.n_total = v;
        }
        if let Some(v) = self.zeta {
            cfg.zeta = v;
        }
        if let Some(v) = &self.rho {
            cfg.rho = v.resolve()?;
        }
        if let Some(v) = self.pcn_steps {
            cfg.pcn_steps = v;
        }
        let (mut lr, mut decay_factor, mut decay_every) = match cfg.proximal {
            ProximalSolver::GradientDescent { lr, decay_factor, decay_every } => (lr, decay_factor, decay_every),
            _ => (0.1, 1.0, 1),
        };
        lr = self.lr.unwrap_or(lr);
        decay_factor = self.decay_factor.unwrap_or(decay_factor);
        decay_every = self.decay_every.unwrap_or(decay_every);
        let cg = ProximalSolver::ConjugateGradient {
            tol: self.cg_tol.unwrap_or(1e-10),
            max_iter: self.cg_max_iter.unwrap_or(200),
        };
        cfg.proximal = match self.proximal.as_deref() {
            None | Some("gradient-descent") => ProximalSolver::GradientDescent { lr, decay_factor, decay_every },
            Some("conjugate-gradient") => cg,
            Some("exact-ridge") => ProximalSolver::ExactRidge,
            Some(other) => return Err(Error::Config(format!("unknown proximal solver `{other}`"))),
        };
        Ok(cfg)
    }
}

/// Each non-empty axis multiplies the set of runs.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SweepSpec {
    pub solvers: Vec<String>,
    pub n_langevin: Vec<LangevinSpec>,
    pub rho: Vec<RhoSpec>,
    pub n_total: Vec<usize>,
}

/// One solver configuration run on every instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Variant {
    pub solver: SolverKind,
    /// Configuration after preset expansion (the base config for single-gradient).
    pub lps: LpsConfig,
}

impl Variant {
    pub fn n_langevin_label(&self) -> String {
        match self.solver {
            SolverKind::SingleGradient => "0".into(),
            _ => match self.lps.n_langevin {
                LangevinSteps::Fixed(k) => k.to_string(),
                LangevinSteps::LinearDecay { start, end } => format!("{start}->{end}"),
            },
        }
    }

    pub fn n_total(&self) -> usize {
        match self.solver {
            SolverKind::SingleGradient => 1,
            _ => self.lps.n_total,
        }
    }

    pub fn rho_label(&self) -> String {
        match self.solver {
            SolverKind::SingleGradient => RhoSchedule::Const(1.0).label(),
            _ => self.lps.rho.label(),
        }
    }

    /// File-name friendly identifier.
    pub fn tag(&self) -> String {
        let raw = format!(
            "{}_nl{}_np{}_{}",
            self.solver,
            self.n_langevin_label().replace("->", "to"),
            self.n_total(),
            self.rho_label()
        );
        raw.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
    }
}

impl ExperimentConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        let cfg: Self = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml_string(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn shape(&self) -> Result<SignalShape> {
        let shape = match self.data.shape.as_slice() {
            [n] => SignalShape::Line(*n),
            [h, w] => SignalShape::Grid { height: *h, width: *w },
            other => return Err(Error::Config(format!("data.shape must have 1 or 2 entries, got {}", other.len()))),
        };
        if shape.is_empty() || shape.len() > MAX_DIM {
            return Err(Error::Config(format!("signal dimension must be in 1..={MAX_DIM}")));
        }
        Ok(shape)
    }

    pub fn base_lps(&self) -> Result<LpsConfig> {
        self.lps.resolve()
    }

    /// Solver configurations in sweep order (solver, N_L, rho, N_P).
    pub fn variants(&self) -> Result<Vec<Variant>> {
        let base = self.base_lps()?;
        let solvers: Vec<SolverKind> = if self.sweep.solvers.is_empty() {
            vec![SolverKind::from_str(&self.solver)?]
        } else {
            self.sweep.solvers.iter().map(|s| SolverKind::from_str(s)).collect::<Result<_>>()?
        };
        let nls: Vec<Option<LangevinSteps>> = axis(&self.sweep.n_langevin, |v| Ok((*v).into()))?;
        let rhos: Vec<Option<RhoSchedule>> = axis(&self.sweep.rho, RhoSpec::resolve)?;
        let nts: Vec<Option<usize>> = axis(&self.sweep.n_total, |v| Ok(*v))?;
        let mut out = Vec::new();
        for &solver in &solvers {
            for nl in &nls {
                for rho in &rhos {
                    for nt in &nts {
                        let mut cfg = base.clone();
                        if let Some(v) = nl {
                            cfg.n_langevin = *v;
                        }
                        if let Some(v) = rho {
                            cfg.rho = *v;
                        }
                        if let Some(v) = nt {
                            cfg.n_total = *v;
                        }
                        let lps = expand(solver, &cfg).unwrap_or(cfg);
                        out.push(Variant { solver, lps });
                    }
                }
            }
        }
        Ok(out)
    }

    pub fn validate(&self) -> Result<()> {
        let shape = self.shape()?;
        let d = shape.len();
        if self.instances == 0 {
            return Err(Error::Config("instances must be at least 1".into()));
        }
        if !(self.peak > 0.0) {
            return Err(Error::Config("peak must be positive".into()));
        }
        if !(self.sigma_n >= 0.0) || !self.sigma_n.is_finite() {
            return Err(Error::Config("sigma_n must be finite and nonnegative".into()));
        }
        if !(self.guidance_step >= 0.0) {
            return Err(Error::Config("guidance_step must be nonnegative".into()));
        }
        if self.data.templates == 0 {
            return Err(Error::Config("data.templates must be at least 1".into()));
        }
        match self.prior.source {
            PriorSource::True => {}
            PriorSource::Inline => {
                let gmm = components_to_gmm(&self.prior.components)?;
                check_dim("inline prior", gmm.dim(), d)?;
            }
            PriorSource::File => {
                if self.prior.path.is_none() {
                    return Err(Error::Config("prior.source = \"file\" needs prior.path".into()));
                }
            }
            PriorSource::FitEm => {
                if self.prior.k == 0 {
                    return Err(Error::Config("prior.k must be at least 1".into()));
                }
                if self.prior.path.is_none() && self.prior.train_samples < self.prior.k {
                    return Err(Error::Config("prior.train_samples must be at least prior.k".into()));
                }
            }
        }
        let op = &self.operator;
        match op.kind {
            OperatorKind::Mask => match &op.mask_keep {
                MaskKeep::Fraction(f) => {
                    if !(*f > 0.0 && *f <= 1.0) {
                        return Err(Error::Config(format!(
                            "operator.mask_keep fraction {f} must be in (0, 1]; an empty mask leaves nothing to condition on"
                        )));
                    }
                }
                MaskKeep::Indices(idx) => {
                    if idx.is_empty() {
                        return Err(Error::Config("operator.mask_keep keeps no coordinates".into()));
                    }
                    if let Some(&bad) = idx.iter().find(|&&i| i >= d) {
                        return Err(Error::Config(format!("mask index {bad} out of range for dimension {d}")));
                    }
                }
            },
            OperatorKind::Blur => {
                if op.kernel_size == 0 || op.kernel_size.is_multiple_of(2) || !(op.kernel_sigma > 0.0) {
                    return Err(Error::Config("blur needs an odd kernel_size and kernel_sigma > 0".into()));
                }
            }
            OperatorKind::Downsample => {
                let (h, w) = shape.rows_cols();
                let rows_ok = matches!(shape, SignalShape::Line(_)) || h % op.factor == 0;
                if op.factor == 0 || w % op.factor != 0 || !rows_ok {
                    return Err(Error::Config(format!("downsample factor {} must divide the signal shape", op.factor)));
                }
            }
            OperatorKind::Dense => {
                if op.rows == 0 {
                    return Err(Error::Config("operator.rows must be at least 1".into()));
                }
            }
            OperatorKind::Identity => {}
        }
        if self.decoder.kind == DecoderKind::Smooth && !(self.decoder.gain >= 0.0) {
            return Err(Error::Config("decoder.gain must be nonnegative".into()));
        }
        for v in self.variants()? {
            if v.solver != SolverKind::SingleGradient {
                v.lps.validate().map_err(|e| Error::Config(format!("{}: {e}", v.tag())))?;
                if v.lps.n_langevin.max() > 0 && self.sigma_n == 0.0 {
                    return Err(Error::Config(format!("{}: Langevin steps need sigma_n > 0", v.tag())));
                }
            }
        }
        Ok(())
    }
}

fn axis<T, U, F>(values: &[T], f: F) -> Result<Vec<Option<U>>>
where
    F: Fn(&T) -> Result<U>,
{
    if values.is_empty() {
        return Ok(vec![None]);
    }
    values.iter().map(|v| f(v).map(Some)).collect()
}

fn check_dim(what: &str, got: usize, want: usize) -> Result<()> {
    if got != want {
        return Err(Error::Config(format!("{what} has dimension {got}, signal has {want}")));
    }
    Ok(())
}

/// One mixture component in a prior file; `cov` is row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComponentFile {
    pub weight: f64,
    pub mean: Vec<f64>,
    pub cov: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PriorFile {
    pub dim: usize,
    pub components: Vec<ComponentFile>,
}

fn components_to_gmm(components: &[ComponentFile]) -> Result<GaussianMixture> {
    let comps = components
        .iter()
        .map(|c| {
            let d = c.mean.len();
            if c.cov.len() != d * d {
                return Err(Error::Config(format!("covariance has {} entries, expected {}", c.cov.len(), d * d)));
            }
            Ok(Component::new(c.weight, DVector::from_column_slice(&c.mean), DMatrix::from_row_slice(d, d, &c.cov)))
        })
        .collect::<Result<Vec<_>>>()?;
    GaussianMixture::new(comps)
}

impl PriorFile {
    pub fn from_gmm(gmm: &GaussianMixture) -> Self {
        let components = gmm
            .components()
            .iter()
            .map(|c| ComponentFile {
                weight: c.weight,
                mean: c.mean.iter().copied().collect(),
                cov: c.cov.transpose().iter().copied().collect(),
            })
            .collect();
        Self { dim: gmm.dim(), components }
    }

    pub fn to_gmm(&self) -> Result<GaussianMixture> {
        let gmm = components_to_gmm(&self.components)?;
        check_dim("prior file", gmm.dim(), self.dim)?;
        Ok(gmm)
    }
}

pub fn write_prior(path: &Path, gmm: &GaussianMixture) -> Result<()> {
    let text = toml::to_string(&PriorFile::from_gmm(gmm)).map_err(|e| Error::Config(e.to_string()))?;
    fs::write(path, text)?;
    Ok(())
}

pub fn read_prior(path: &Path) -> Result<GaussianMixture> {
    let text = fs::read_to_string(path)?;
    let file: PriorFile = toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    file.to_gmm()
}

pub fn inline_prior(spec: &PriorSpec) -> Result<GaussianMixture> {
    components_to_gmm(&spec.components)
}
