//! Measurement models: linear operators with exact adjoints, an optional
//! smooth nonlinear decoder, and Gaussian measurement simulation.

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::rng::standard_normal;
use crate::{Error, Result};

/// Layout of a signal vector; 2D grids are stored row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SignalShape {
    Line(usize),
    Grid { height: usize, width: usize },
}

impl SignalShape {
    pub fn len(&self) -> usize {
        match *self {
            SignalShape::Line(n) => n,
            SignalShape::Grid { height, width } => height * width,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// (height, width), with a line treated as a single row.
    pub fn rows_cols(&self) -> (usize, usize) {
        match *self {
            SignalShape::Line(n) => (1, n),
            SignalShape::Grid { height, width } => (height, width),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Kind {
    Identity { dim: usize },
    Mask { dim: usize, keep: Vec<usize> },
    Blur { shape: SignalShape, kernel: Vec<f64>, size: usize },
    Downsample { shape: SignalShape, factor: usize },
    Dense { matrix: DMatrix<f64> },
}

/// A linear measurement map with its exact transpose.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOperator {
    kind: Kind,
}

/// Normalized Gaussian kernel of odd `size`; 2D kernels are row-major `size x size`.
pub fn gaussian_kernel(size: usize, sigma: f64, two_d: bool) -> Result<Vec<f64>> {
    if size == 0 || size.is_multiple_of(2) {
        return Err(Error::invalid(format!("kernel size {size} must be odd")));
    }
    if !(sigma > 0.0) {
        return Err(Error::invalid("kernel sigma must be positive"));
    }
    let c = (size / 2) as f64;
    let g: Vec<f64> = (0..size)
        .map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp())
        .collect();
    let kernel: Vec<f64> = if two_d {
        g.iter().flat_map(|a| g.iter().map(move |b| a * b)).collect()
    } else {
        g
    };
    let s: f64 = kernel.iter().sum();
    Ok(kernel.into_iter().map(|v| v / s).collect())
}

impl ForwardOperator {
    pub fn identity(dim: usize) -> Self {
        Self { kind: Kind::Identity { dim } }
    }

    /// Keeps the listed coordinates, in ascending order.
    pub fn mask(dim: usize, mut keep: Vec<usize>) -> Result<Self> {
        keep.sort_unstable();
        keep.dedup();
        if let Some(&bad) = keep.iter().find(|&&i| i >= dim) {
            return Err(Error::invalid(format!("mask index {bad} out of range for dimension {dim}")));
        }
        Ok(Self { kind: Kind::Mask { dim, keep } })
    }

    /// Keeps a uniformly random subset of `round(keep_fraction * dim)` coordinates.
    pub fn random_mask<R: Rng + ?Sized>(dim: usize, keep_fraction: f64, rng: &mut R) -> Result<Self> {
        if !(0.0..=1.0).contains(&keep_fraction) {
            return Err(Error::invalid("mask keep fraction must lie in [0, 1]"));
        }
        let n_keep = (keep_fraction * dim as f64).round() as usize;
        let mut idx: Vec<usize> = (0..dim).collect();
        // partial Fisher-Yates
        for i in 0..n_keep {
            let j = rng.random_range(i..dim);
            idx.swap(i, j);
        }
        idx.truncate(n_keep);
        Self::mask(dim, idx)
    }

    /// Circular convolution with an odd-sized kernel (1D for lines, square for grids).
    pub fn circular_blur(shape: SignalShape, kernel: Vec<f64>) -> Result<Self> {
        let size = match shape {
            SignalShape::Line(_) => kernel.len(),
            SignalShape::Grid { .. } => (kernel.len() as f64).sqrt().round() as usize,
        };
        let expected = match shape {
            SignalShape::Line(_) => size,
            SignalShape::Grid { .. } => size * size,
        };
        if size.is_multiple_of(2) || expected != kernel.len() {
            return Err(Error::invalid("blur kernel must have odd side length"));
        }
        if shape.is_empty() {
            return Err(Error::invalid("blur signal shape is empty"));
        }
        Ok(Self { kind: Kind::Blur { shape, kernel, size } })
    }

    pub fn gaussian_blur(shape: SignalShape, size: usize, sigma: f64) -> Result<Self> {
        let two_d = matches!(shape, SignalShape::Grid { .. });
        Self::circular_blur(shape, gaussian_kernel(size, sigma, two_d)?)
    }

    /// Block averaging over `factor` samples (lines) or `factor x factor` blocks (grids).
    pub fn downsample(shape: SignalShape, factor: usize) -> Result<Self> {
        if factor == 0 {
            return Err(Error::invalid("downsample factor must be positive"));
        }
        let (h, w) = shape.rows_cols();
        let ok = match shape {
            SignalShape::Line(n) => n % factor == 0,
            SignalShape::Grid { .. } => h % factor == 0 && w % factor == 0,
        };
        if !ok || shape.is_empty() {
            return Err(Error::invalid(format!(
                "signal shape {shape:?} is not divisible by factor {factor}"
            )));
        }
        Ok(Self { kind: Kind::Downsample { shape, factor } })
    }

    pub fn dense(matrix: DMatrix<f64>) -> Self {
        Self { kind: Kind::Dense { matrix } }
    }

    pub fn in_dim(&self) -> usize {
        match &self.kind {
            Kind::Identity { dim } | Kind::Mask { dim, .. } => *dim,
            Kind::Blur { shape, .. } | Kind::Downsample { shape, .. } => shape.len(),
            Kind::Dense { matrix } => matrix.ncols(),
        }
    }

    pub fn out_dim(&self) -> usize {
        match &self.kind {
            Kind::Identity { dim } => *dim,
            Kind::Mask { keep, .. } => keep.len(),
            Kind::Blur { shape, .. } => shape.len(),
            Kind::Downsample { shape, factor } => match shape {
                SignalShape::Line(n) => n / factor,
                SignalShape::Grid { height, width } => (height / factor) * (width / factor),
            },
            Kind::Dense { matrix } => matrix.nrows(),
        }
    }

    pub fn name(&self) -> &'static str {
        match self.kind {
            Kind::Identity { .. } => "identity",
            Kind::Mask { .. } => "mask",
            Kind::Blur { .. } => "blur",
            Kind::Downsample { .. } => "downsample",
            Kind::Dense { .. } => "dense",
        }
    }

    pub fn apply(&self, x: &DVector<f64>) -> Result<DVector<f64>> {
        if x.len() != self.in_dim() {
            return Err(Error::dims("operator input", self.in_dim(), x.len()));
        }
        Ok(self.apply_unchecked(x))
    }

    pub fn adjoint(&self, u: &DVector<f64>) -> Result<DVector<f64>> {
        if u.len() != self.out_dim() {
            return Err(Error::dims("operator adjoint input", self.out_dim(), u.len()));
        }
        Ok(self.adjoint_unchecked(u))
    }

    pub(crate) fn apply_unchecked(&self, x: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            Kind::Identity { .. } => x.clone(),
            Kind::Mask { keep, .. } => DVector::from_iterator(keep.len(), keep.iter().map(|&i| x[i])),
            Kind::Blur { shape, kernel, size } => blur(*shape, kernel, *size, x, 1),
            Kind::Downsample { shape, factor } => {
                let (h, w) = shape.rows_cols();
                let fy = if matches!(shape, SignalShape::Line(_)) { 1 } else { *factor };
                let fx = *factor;
                let (oh, ow) = (h / fy, w / fx);
                let norm = 1.0 / (fy * fx) as f64;
                DVector::from_fn(oh * ow, |o, _| {
                    let (r, c) = (o / ow, o % ow);
                    let mut s = 0.0;
                    for dy in 0..fy {
                        for dx in 0..fx {
                            s += x[(r * fy + dy) * w + c * fx + dx];
                        }
                    }
                    s * norm
                })
            }
            Kind::Dense { matrix } => matrix * x,
        }
    }

    pub(crate) fn adjoint_unchecked(&self, u: &DVector<f64>) -> DVector<f64> {
        match &self.kind {
            Kind::Identity { .. } => u.clone(),
            Kind::Mask { dim, keep } => {
                let mut x = DVector::zeros(*dim);
                for (v, &i) in u.iter().zip(keep) {
                    x[i] = *v;
                }
                x
            }
            Kind::Blur { shape, kernel, size } => blur(*shape, kernel, *size, u, -1),
            Kind::Downsample { shape, factor } => {
                let (h, w) = shape.rows_cols();
                let fy = if matches!(shape, SignalShape::Line(_)) { 1 } else { *factor };
                let fx = *factor;
                let ow = w / fx;
                let norm = 1.0 / (fy * fx) as f64;
                DVector::from_fn(h * w, |i, _| {
                    let (r, c) = (i / w, i % w);
                    u[(r / fy) * ow + c / fx] * norm
                })
            }
            Kind::Dense { matrix } => matrix.transpose() * u,
        }
    }

    /// Dense `m x d` matrix, built column by column from `apply`.
    pub fn to_dense(&self) -> DMatrix<f64> {
        if let Kind::Dense { matrix } = &self.kind {
            return matrix.clone();
        }
        let d = self.in_dim();
        let mut a = DMatrix::zeros(self.out_dim(), d);
        let mut e = DVector::zeros(d);
        for j in 0..d {
            e[j] = 1.0;
            a.set_column(j, &self.apply_unchecked(&e));
            e[j] = 0.0;
        }
        a
    }
}

/// Circular convolution (`sign = 1`) or its transpose (`sign = -1`).
fn blur(shape: SignalShape, kernel: &[f64], size: usize, x: &DVector<f64>, sign: isize) -> DVector<f64> {
    let (h, w) = shape.rows_cols();
    let c = (size / 2) as isize;
    let (kh, ch) = match shape {
        SignalShape::Line(_) => (1, 0),
        SignalShape::Grid { .. } => (size, c),
    };
    let wrap = |v: isize, n: usize| v.rem_euclid(n as isize) as usize;
    DVector::from_fn(h * w, |i, _| {
        let (r, col) = ((i / w) as isize, (i % w) as isize);
        let mut s = 0.0;
        for ky in 0..kh {
            for kx in 0..size {
                let k = kernel[ky * size + kx];
                let sr = wrap(r - sign * (ky as isize - ch), h);
                let sc = wrap(col - sign * (kx as isize - c), w);
                s += k * x[sr * w + sc];
            }
        }
        s
    })
}

/// Latent-to-signal map. `Smooth` is `z + gain * tanh(W z + b)`.
#[derive(Debug, Clone, PartialEq)]
pub enum Decoder {
    Identity,
    Smooth { w: DMatrix<f64>, b: DVector<f64>, gain: f64 },
}

impl Decoder {
    pub fn smooth(w: DMatrix<f64>, b: DVector<f64>, gain: f64) -> Result<Self> {
        if !w.is_square() || w.nrows() != b.len() {
            return Err(Error::invalid("smooth decoder needs square W and matching b"));
        }
        Ok(Decoder::Smooth { w, b, gain })
    }

    /// Random smooth decoder with `W ~ N(0, 1/d)` and `b ~ N(0, 0.1^2)`.
    pub fn random_smooth<R: Rng + ?Sized>(dim: usize, gain: f64, rng: &mut R) -> Self {
        let scale = 1.0 / (dim as f64).sqrt();
        let w = DMatrix::from_iterator(dim, dim, standard_normal(rng, dim * dim).iter().map(|v| v * scale));
        let b = standard_normal(rng, dim) * 0.1;
        Decoder::Smooth { w, b, gain }
    }

    pub fn is_identity(&self) -> bool {
        match self {
            Decoder::Identity => true,
            Decoder::Smooth { gain, .. } => *gain == 0.0,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Decoder::Identity => "identity",
            Decoder::Smooth { .. } => "smooth",
        }
    }

    fn check(&self, z: &DVector<f64>) -> Result<()> {
        match self {
            Decoder::Smooth { b, .. } if b.len() != z.len() => Err(Error::dims("decoder input", b.len(), z.len())),
            _ => Ok(()),
        }
    }

    pub fn decode(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(z)?;
        Ok(match self {
            Decoder::Identity => z.clone(),
            Decoder::Smooth { w, b, gain } => z + (w * z + b).map(f64::tanh) * *gain,
        })
    }

    /// `J(z)^T u`, with `J = I + gain * diag(sech^2(W z + b)) W`.
    pub fn vjp(&self, z: &DVector<f64>, u: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(z)?;
        if u.len() != z.len() {
            return Err(Error::dims("decoder cotangent", z.len(), u.len()));
        }
        Ok(match self {
            Decoder::Identity => u.clone(),
            Decoder::Smooth { w, b, gain } => {
                let sech2 = (w * z + b).map(|a| 1.0 - a.tanh().powi(2));
                u + w.tr_mul(&sech2.component_mul(u)) * *gain
            }
        })
    }

    /// `J(z) v`.
    pub fn jvp(&self, z: &DVector<f64>, v: &DVector<f64>) -> Result<DVector<f64>> {
        self.check(z)?;
        Ok(match self {
            Decoder::Identity => v.clone(),
            Decoder::Smooth { w, b, gain } => {
                let sech2 = (w * z + b).map(|a| 1.0 - a.tanh().powi(2));
                v + sech2.component_mul(&(w * v)) * *gain
            }
        })
    }
}

/// An observed vector together with the model that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct Measurement {
    pub y: DVector<f64>,
    pub operator: ForwardOperator,
    pub decoder: Decoder,
    pub sigma_n: f64,
}

impl Measurement {
    pub fn new(y: DVector<f64>, operator: ForwardOperator, decoder: Decoder, sigma_n: f64) -> Result<Self> {
        if !(sigma_n >= 0.0) {
            return Err(Error::invalid("sigma_n must be nonnegative"));
        }
        if y.len() != operator.out_dim() {
            return Err(Error::dims("measurement vector", operator.out_dim(), y.len()));
        }
        if let Decoder::Smooth { b, .. } = &decoder {
            if b.len() != operator.in_dim() {
                return Err(Error::dims("decoder output", operator.in_dim(), b.len()));
            }
        }
        Ok(Self { y, operator, decoder, sigma_n })
    }

    pub fn latent_dim(&self) -> usize {
        self.operator.in_dim()
    }

    fn check_latent(&self, z: &DVector<f64>) -> Result<()> {
        if z.len() != self.latent_dim() {
            return Err(Error::dims("latent", self.latent_dim(), z.len()));
        }
        Ok(())
    }

    /// `y - A(D(z))`.
    pub fn residual(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        self.check_latent(z)?;
        let x = self.decoder.decode(z)?;
        Ok(&self.y - self.operator.apply_unchecked(&x))
    }

    /// `||y - A(D(z))||^2`.
    pub fn data_fidelity(&self, z: &DVector<f64>) -> Result<f64> {
        Ok(self.residual(z)?.norm_squared())
    }

    /// Gradient of [`data_fidelity`](Self::data_fidelity): `-2 J^T A^T (y - A D z)`.
    pub fn data_fidelity_grad(&self, z: &DVector<f64>) -> Result<DVector<f64>> {
        let r = self.residual(z)?;
        let back = self.operator.adjoint_unchecked(&r);
        Ok(self.decoder.vjp(z, &back)? * -2.0)
    }
}

/// `y = A(D(z)) + sigma_n * eps` with `eps ~ N(0, I_m)`.
pub fn simulate_measurement<R: Rng + ?Sized>(
    z_true: &DVector<f64>,
    operator: &ForwardOperator,
    decoder: &Decoder,
    sigma_n: f64,
    rng: &mut R,
) -> Result<Measurement> {
    if !(sigma_n >= 0.0) {
        return Err(Error::invalid("sigma_n must be nonnegative"));
    }
    let clean = operator.apply(&decoder.decode(z_true)?)?;
    let noise = standard_normal(rng, clean.len());
    let y = if sigma_n == 0.0 { clean } else { clean + noise * sigma_n };
    Measurement::new(y, operator.clone(), decoder.clone(), sigma_n)
}
