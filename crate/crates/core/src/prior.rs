//! Closed-form rectified-flow machinery over Gaussian-mixture data.
//!
//! Under the independent coupling `x_t = (1 - t) x0 + t x1` with
//! `x1 ~ N(0, I)`, every quantity the sampler needs is again a Gaussian
//! mixture: the marginal of `x_t`, the conditional of `x0` given `x_t`,
//! and the posterior of `x0` given a linear-Gaussian measurement. The
//! velocity field is the difference of two conditional means and is
//! therefore exact, not learned.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::forward::{ForwardOperator, Measurement};
use crate::linalg::{self, Chol};
use crate::rng::standard_normal;
use crate::{Error, Result};

type ConditionalPart = (f64, DVector<f64>, DMatrix<f64>, Chol);

/// Time used in place of `t = 0` when the velocity is queried there.
pub const VELOCITY_T_MIN: f64 = 1e-6;

const WEIGHT_SUM_TOL: f64 = 1e-12;
const SYMMETRY_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Component {
    pub weight: f64,
    pub mean: DVector<f64>,
    pub cov: DMatrix<f64>,
}

impl Component {
    pub fn new(weight: f64, mean: DVector<f64>, cov: DMatrix<f64>) -> Self {
        Self { weight, mean, cov }
    }

    pub fn isotropic(weight: f64, mean: DVector<f64>, variance: f64) -> Self {
        let d = mean.len();
        Self::new(weight, mean, DMatrix::identity(d, d) * variance)
    }
}

/// A finite mixture of full-covariance Gaussians.
///
/// Immutable after construction. Cholesky factors are computed once and
/// cached; log weights are kept alongside the linear weights so that far
/// apart components do not underflow.
#[derive(Debug, Clone)]
pub struct GaussianMixture {
    dim: usize,
    components: Vec<Component>,
    log_weights: Vec<f64>,
    chols: Vec<Chol>,
}

/// Tweedie estimates of both endpoints of the straight path through `x_t`.
#[derive(Debug, Clone, PartialEq)]
pub struct TweediePair {
    pub x0_hat: DVector<f64>,
    pub x1_hat: DVector<f64>,
    pub t: f64,
}

fn check_time(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) || t.is_nan() {
        return Err(Error::invalid(format!("time {t} outside [0, 1]")));
    }
    Ok(())
}

impl GaussianMixture {
    pub fn new(components: Vec<Component>) -> Result<Self> {
        let sum: f64 = components.iter().map(|c| c.weight).sum();
        if components.iter().any(|c| !(c.weight >= 0.0)) {
            return Err(Error::invalid("mixture weights must be nonnegative"));
        }
        if (sum - 1.0).abs() > WEIGHT_SUM_TOL {
            return Err(Error::invalid(format!("mixture weights sum to {sum}, not 1")));
        }
        let log_weights = components.iter().map(|c| c.weight.ln()).collect();
        Self::build(components, log_weights)
    }

    /// Builds a mixture from unnormalized log weights.
    fn from_log_weights(
        mut log_weights: Vec<f64>,
        means: Vec<DVector<f64>>,
        covs: Vec<DMatrix<f64>>,
    ) -> Result<Self> {
        linalg::normalize_log_weights(&mut log_weights);
        let components = log_weights
            .iter()
            .zip(means)
            .zip(covs)
            .map(|((lw, mean), cov)| Component::new(lw.exp(), mean, cov))
            .collect();
        Self::build(components, log_weights)
    }

    fn build(components: Vec<Component>, log_weights: Vec<f64>) -> Result<Self> {
        let first = components
            .first()
            .ok_or_else(|| Error::invalid("mixture needs at least one component"))?;
        let dim = first.mean.len();
        if dim == 0 {
            return Err(Error::invalid("mixture dimension must be positive"));
        }
        let mut chols = Vec::with_capacity(components.len());
        for (k, c) in components.iter().enumerate() {
            if c.mean.len() != dim || c.cov.nrows() != dim || c.cov.ncols() != dim {
                return Err(Error::invalid(format!(
                    "component {k} does not match mixture dimension {dim}"
                )));
            }
            let scale = c.cov.amax().max(1.0);
            if (&c.cov - c.cov.transpose()).amax() > SYMMETRY_TOL * scale {
                return Err(Error::invalid(format!("component {k} covariance is not symmetric")));
            }
            chols.push(linalg::robust_cholesky(&c.cov)?);
        }
        Ok(Self { dim, components, log_weights, chols })
    }

    pub fn standard_normal(dim: usize) -> Self {
        Self::new(vec![Component::isotropic(1.0, DVector::zeros(dim), 1.0)])
            .expect("standard normal is a valid mixture")
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn components(&self) -> &[Component] {
        &self.components
    }

    pub fn n_components(&self) -> usize {
        self.components.len()
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|c| c.weight).collect()
    }

    pub fn log_weights(&self) -> &[f64] {
        &self.log_weights
    }

    fn check_point(&self, x: &DVector<f64>) -> Result<()> {
        if x.len() != self.dim {
            return Err(Error::dims("mixture point", self.dim, x.len()));
        }
        Ok(())
    }

    /// Mixture mean.
    pub fn mean(&self) -> DVector<f64> {
        self.components
            .iter()
            .fold(DVector::zeros(self.dim), |acc, c| acc + &c.mean * c.weight)
    }

    /// Mixture covariance by the law of total covariance.
    pub fn covariance(&self) -> DMatrix<f64> {
        let m = self.mean();
        self.components.iter().fold(DMatrix::zeros(self.dim, self.dim), |acc, c| {
            let dm = &c.mean - &m;
            acc + (&c.cov + &dm * dm.transpose()) * c.weight
        })
    }

    pub fn log_density(&self, x: &DVector<f64>) -> Result<f64> {
        self.check_point(x)?;
        let terms: Vec<f64> = self
            .components
            .iter()
            .zip(&self.chols)
            .zip(&self.log_weights)
            .map(|((c, chol), lw)| lw + linalg::gaussian_log_density(x, &c.mean, chol))
            .collect();
        Ok(linalg::log_sum_exp(&terms))
    }

    fn pick_component<R: Rng + ?Sized>(&self, rng: &mut R) -> usize {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let mut last = 0;
        for (k, c) in self.components.iter().enumerate() {
            if c.weight <= 0.0 {
                continue;
            }
            acc += c.weight;
            last = k;
            if u < acc {
                return k;
            }
        }
        last
    }

    pub fn sample_one<R: Rng + ?Sized>(&self, rng: &mut R) -> DVector<f64> {
        let k = self.pick_component(rng);
        let z = standard_normal(rng, self.dim);
        &self.components[k].mean + self.chols[k].l_dirty().lower_triangle() * z
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R, n: usize) -> Result<Vec<DVector<f64>>> {
        if n == 0 {
            return Err(Error::invalid("sample count must be at least 1"));
        }
        Ok((0..n).map(|_| self.sample_one(rng)).collect())
    }

    /// Law of `x_t = (1 - t) x0 + t x1` with `x0` from this mixture.
    pub fn marginal_at(&self, t: f64) -> Result<Self> {
        check_time(t)?;
        if t == 0.0 {
            return Ok(self.clone());
        }
        let s = 1.0 - t;
        let eye = DMatrix::<f64>::identity(self.dim, self.dim);
        let components = self
            .components
            .iter()
            .map(|c| Component::new(c.weight, &c.mean * s, &c.cov * (s * s) + &eye * (t * t)))
            .collect();
        Self::build(components, self.log_weights.clone())
    }

    /// Per-component quantities shared by the conditional and its mean.
    fn conditional_parts(
        &self,
        t: f64,
        x_t: &DVector<f64>,
    ) -> Result<Vec<ConditionalPart>> {
        let s = 1.0 - t;
        let eye = DMatrix::<f64>::identity(self.dim, self.dim);
        self.components
            .iter()
            .zip(&self.log_weights)
            .map(|(c, lw)| {
                let marginal_cov = &c.cov * (s * s) + &eye * (t * t);
                let chol = linalg::robust_cholesky(&marginal_cov)?;
                let marginal_mean = &c.mean * s;
                let log_w = lw + linalg::gaussian_log_density(x_t, &marginal_mean, &chol);
                let solved = chol.solve(&(x_t - &marginal_mean));
                let mean = &c.mean + (&c.cov * solved) * s;
                Ok((log_w, mean, marginal_cov, chol))
            })
            .collect()
    }

    /// Exact `p(x0 | x_t)`; undefined at `t = 0` where it collapses to a point mass.
    pub fn conditional_x0_given_xt(&self, t: f64, x_t: &DVector<f64>) -> Result<Self> {
        check_time(t)?;
        if t == 0.0 {
            return Err(Error::invalid("conditional of x0 given x_t is a point mass at t = 0"));
        }
        self.check_point(x_t)?;
        let s = 1.0 - t;
        let parts = self.conditional_parts(t, x_t)?;
        let mut log_w = Vec::with_capacity(parts.len());
        let mut means = Vec::with_capacity(parts.len());
        let mut covs = Vec::with_capacity(parts.len());
        for ((lw, mean, _, chol), c) in parts.into_iter().zip(&self.components) {
            let gain = chol.solve(&c.cov);
            let mut cov = &c.cov - (&c.cov * gain) * (s * s);
            linalg::symmetrize(&mut cov);
            log_w.push(lw);
            means.push(mean);
            covs.push(cov);
        }
        Self::from_log_weights(log_w, means, covs)
    }

    /// `E[x0 | x_t]` without forming the conditional covariances.
    pub fn posterior_mean_x0(&self, t: f64, x_t: &DVector<f64>) -> Result<DVector<f64>> {
        check_time(t)?;
        if t == 0.0 {
            return Err(Error::invalid("E[x0 | x_t] requires t > 0"));
        }
        self.check_point(x_t)?;
        let parts = self.conditional_parts(t, x_t)?;
        let mut log_w: Vec<f64> = parts.iter().map(|p| p.0).collect();
        linalg::normalize_log_weights(&mut log_w);
        Ok(parts
            .iter()
            .zip(&log_w)
            .fold(DVector::zeros(self.dim), |acc, (p, lw)| acc + &p.1 * lw.exp()))
    }

    /// Marginal velocity `E[x1 | x_t] - E[x0 | x_t]`.
    ///
    /// At `t = 0` the conditional degenerates; the one-sided limit is taken
    /// by evaluating at [`VELOCITY_T_MIN`].
    pub fn velocity(&self, t: f64, x_t: &DVector<f64>) -> Result<DVector<f64>> {
        check_time(t)?;
        let t = t.max(VELOCITY_T_MIN);
        let m0 = self.posterior_mean_x0(t, x_t)?;
        let m1 = (x_t - &m0 * (1.0 - t)) / t;
        Ok(m1 - m0)
    }

    pub fn tweedie_pair(&self, t: f64, x_t: &DVector<f64>) -> Result<TweediePair> {
        let v = self.velocity(t, x_t)?;
        Ok(TweediePair::from_velocity(t, x_t, &v))
    }

    /// Exact `p(x0 | y)` for `y = A x0 + sigma_n * eps`.
    ///
    /// Each component is updated by Gaussian conjugacy and reweighted by
    /// its evidence `N(y; A mu_k, A Sigma_k A^T + sigma_n^2 I)`.
    pub fn posterior_x0_given_y(
        &self,
        op: &ForwardOperator,
        y: &DVector<f64>,
        sigma_n: f64,
    ) -> Result<Self> {
        if !(sigma_n > 0.0) {
            return Err(Error::invalid("posterior needs sigma_n > 0"));
        }
        if op.in_dim() != self.dim {
            return Err(Error::dims("operator input", self.dim, op.in_dim()));
        }
        if y.len() != op.out_dim() {
            return Err(Error::dims("measurement", op.out_dim(), y.len()));
        }
        let a = op.to_dense();
        let m = a.nrows();
        let noise = DMatrix::<f64>::identity(m, m) * (sigma_n * sigma_n);
        let mut log_w = Vec::with_capacity(self.components.len());
        let mut means = Vec::with_capacity(self.components.len());
        let mut covs = Vec::with_capacity(self.components.len());
        for (c, lw) in self.components.iter().zip(&self.log_weights) {
            let sigma_at = &c.cov * a.transpose();
            let evidence_cov = &a * &sigma_at + &noise;
            let chol = linalg::robust_cholesky(&evidence_cov)?;
            let pred = &a * &c.mean;
            log_w.push(lw + linalg::gaussian_log_density(y, &pred, &chol));
            let gain_t = chol.solve(&sigma_at.transpose());
            let mean = &c.mean + gain_t.transpose() * (y - pred);
            let mut cov = &c.cov - &sigma_at * gain_t;
            linalg::symmetrize(&mut cov);
            means.push(mean);
            covs.push(cov);
        }
        Self::from_log_weights(log_w, means, covs)
    }

    /// [`posterior_x0_given_y`](Self::posterior_x0_given_y) for a measurement
    /// record; only linear measurements have a closed-form posterior.
    pub fn posterior_given_measurement(&self, meas: &Measurement) -> Result<Self> {
        if !meas.decoder.is_identity() {
            return Err(Error::Unsupported(
                "closed-form posterior requires the identity decoder".into(),
            ));
        }
        self.posterior_x0_given_y(&meas.operator, &meas.y, meas.sigma_n)
    }
}

impl TweediePair {
    /// `x0 = x_t - t v`, `x1 = x_t + (1 - t) v`.
    pub fn from_velocity(t: f64, x_t: &DVector<f64>, v: &DVector<f64>) -> Self {
        Self {
            x0_hat: x_t - v * t,
            x1_hat: x_t + v * (1.0 - t),
            t,
        }
    }

    /// The point on the straight path at time `s`.
    pub fn interpolate(&self, s: f64) -> DVector<f64> {
        &self.x0_hat * (1.0 - s) + &self.x1_hat * s
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EmOptions {
    pub max_iter: usize,
    pub rel_tol: f64,
    pub cov_floor: f64,
    /// Re-initializations allowed after a component loses all support.
    pub restarts: usize,
}

impl Default for EmOptions {
    fn default() -> Self {
        Self { max_iter: 100, rel_tol: 1e-8, cov_floor: 1e-6, restarts: 3 }
    }
}

fn kmeans_pp_centers<R: Rng + ?Sized>(
    data: &[DVector<f64>],
    k: usize,
    rng: &mut R,
) -> Vec<DVector<f64>> {
    let n = data.len();
    let mut centers = vec![data[rng.random_range(0..n)].clone()];
    let mut d2: Vec<f64> = data.iter().map(|x| (x - &centers[0]).norm_squared()).collect();
    while centers.len() < k {
        let total: f64 = d2.iter().sum();
        let idx = if total > 0.0 {
            let u = rng.random::<f64>() * total;
            let mut acc = 0.0;
            d2.iter()
                .position(|&w| {
                    acc += w;
                    u < acc
                })
                .unwrap_or(n - 1)
        } else {
            rng.random_range(0..n)
        };
        let c = data[idx].clone();
        for (x, d) in data.iter().zip(d2.iter_mut()) {
            *d = d.min((x - &c).norm_squared());
        }
        centers.push(c);
    }
    centers
}

type MStep = (Vec<f64>, Vec<DVector<f64>>, Vec<DMatrix<f64>>);

/// Weighted mean/covariance M-step. `None` when a component has no support.
fn m_step(
    data: &[DVector<f64>],
    resp: &[Vec<f64>],
    floor: f64,
) -> Option<MStep> {
    let n = data.len();
    let d = data[0].len();
    let k = resp[0].len();
    let mut log_w = Vec::with_capacity(k);
    let mut means = Vec::with_capacity(k);
    let mut covs = Vec::with_capacity(k);
    for j in 0..k {
        let nk: f64 = resp.iter().map(|r| r[j]).sum();
        if nk <= 1e-10 * n as f64 {
            return None;
        }
        let mean = data
            .iter()
            .zip(resp)
            .fold(DVector::zeros(d), |acc, (x, r)| acc + x * r[j])
            / nk;
        let mut cov = data.iter().zip(resp).fold(DMatrix::zeros(d, d), |acc, (x, r)| {
            let dx = x - &mean;
            acc + &dx * dx.transpose() * r[j]
        }) / nk;
        for i in 0..d {
            cov[(i, i)] += floor;
        }
        linalg::symmetrize(&mut cov);
        log_w.push((nk / n as f64).ln());
        means.push(mean);
        covs.push(cov);
    }
    Some((log_w, means, covs))
}

fn em_attempt<R: Rng + ?Sized>(
    data: &[DVector<f64>],
    k: usize,
    opts: &EmOptions,
    rng: &mut R,
) -> Result<Option<GaussianMixture>> {
    let centers = kmeans_pp_centers(data, k, rng);
    let mut resp: Vec<Vec<f64>> = data
        .iter()
        .map(|x| {
            let best = centers
                .iter()
                .enumerate()
                .map(|(j, c)| (j, (x - c).norm_squared()))
                .fold((0, f64::INFINITY), |b, cur| if cur.1 < b.1 { cur } else { b })
                .0;
            (0..k).map(|j| if j == best { 1.0 } else { 0.0 }).collect()
        })
        .collect();

    let mut prev_ll = f64::NEG_INFINITY;
    let mut model = None;
    for _ in 0..opts.max_iter {
        let Some((log_w, means, covs)) = m_step(data, &resp, opts.cov_floor) else {
            return Ok(None);
        };
        let gmm = GaussianMixture::from_log_weights(log_w, means, covs)?;
        let mut ll = 0.0;
        for (x, r) in data.iter().zip(resp.iter_mut()) {
            let mut terms: Vec<f64> = gmm
                .components
                .iter()
                .zip(&gmm.chols)
                .zip(&gmm.log_weights)
                .map(|((c, chol), lw)| lw + linalg::gaussian_log_density(x, &c.mean, chol))
                .collect();
            ll += linalg::normalize_log_weights(&mut terms);
            for (dst, lt) in r.iter_mut().zip(terms) {
                *dst = lt.exp();
            }
        }
        model = Some(gmm);
        let converged = (ll - prev_ll).abs() < opts.rel_tol * ll.abs();
        prev_ll = ll;
        if converged {
            break;
        }
    }
    Ok(model)
}

/// Maximum-likelihood mixture by EM with k-means++ initialization.
pub fn fit_em<R: Rng + ?Sized>(
    data: &[DVector<f64>],
    k: usize,
    opts: &EmOptions,
    rng: &mut R,
) -> Result<GaussianMixture> {
    if k == 0 {
        return Err(Error::invalid("EM needs at least one component"));
    }
    let d = data.first().map(|x| x.len()).unwrap_or(0);
    if data.len() < k * (d + 1) || d == 0 {
        return Err(Error::invalid(format!(
            "EM with {k} components in dimension {d} needs at least {} samples, got {}",
            k * (d + 1),
            data.len()
        )));
    }
    if data.iter().any(|x| x.len() != d) {
        return Err(Error::invalid("EM data rows have inconsistent dimension"));
    }
    for _ in 0..=opts.restarts {
        if let Some(gmm) = em_attempt(data, k, opts, rng)? {
            return Ok(gmm);
        }
    }
    Err(Error::FitFailure(format!(
        "a component lost all support after {} restarts",
        opts.restarts
    )))
}
