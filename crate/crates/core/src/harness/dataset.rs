//! Synthetic signals drawn from an explicit Gaussian mixture.
//!
//! Component `k` of `K` is centred on a template placed at fraction
//! `(k + 1) / (K + 1)` of the signal width. Templates cycle through three
//! shapes: a Gaussian bump, a smoothed step and a pair of bumps (lines),
//! or a radial blob, a smoothed half-plane and a ring (grids). Values sit
//! in `[0.2, 0.8]`. Each component adds a squared-exponential
//! perturbation with amplitude `0.05 + 0.01 k`, length scale one eighth
//! of the width, and a `1e-4` nugget, so samples stay well inside `[0, 1]`.

use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;

use crate::forward::SignalShape;
use crate::prior::{Component, GaussianMixture};
use crate::{Error, Result};

pub const MAX_DIM: usize = 256;
pub const NUGGET: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct BlobDataset {
    pub shape: SignalShape,
    pub samples: Vec<DVector<f64>>,
    /// The generating mixture.
    pub gmm: GaussianMixture,
}

fn coords(shape: SignalShape) -> Vec<(f64, f64)> {
    let (h, w) = shape.rows_cols();
    (0..h * w).map(|i| ((i / w) as f64, (i % w) as f64)).collect()
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Mean signal of component `k` out of `n_templates`.
pub fn template(shape: SignalShape, k: usize, n_templates: usize) -> DVector<f64> {
    let (h, w) = shape.rows_cols();
    let frac = (k + 1) as f64 / (n_templates + 1) as f64;
    let cx = frac * (w - 1) as f64;
    let cy = frac * (h.saturating_sub(1)) as f64;
    let width = (w as f64 / 6.0).max(1.0);
    let pts = coords(shape);
    let values = pts.iter().map(|&(r, c)| {
        let dist = match shape {
            SignalShape::Line(_) => (c - cx).abs(),
            SignalShape::Grid { .. } => ((r - cy).powi(2) + (c - cx).powi(2)).sqrt(),
        };
        let shape_val = match k % 3 {
            0 => (-(dist * dist) / (2.0 * width * width)).exp(),
            1 => match shape {
                SignalShape::Line(_) => sigmoid(c - cx),
                SignalShape::Grid { .. } => sigmoid((c - cx) + 0.5 * (r - cy)),
            },
            _ => match shape {
                SignalShape::Line(_) => {
                    let off = width;
                    let b = |x: f64| (-(x * x) / (2.0 * (0.5 * width).powi(2))).exp();
                    (b(c - cx + off) + b(c - cx - off)).min(1.0)
                }
                SignalShape::Grid { .. } => {
                    let ring = dist - width;
                    (-(ring * ring) / (2.0 * (0.5 * width).powi(2))).exp()
                }
            },
        };
        0.2 + 0.6 * shape_val
    });
    DVector::from_iterator(pts.len(), values)
}

fn smooth_cov(shape: SignalShape, amplitude: f64) -> DMatrix<f64> {
    let pts = coords(shape);
    let (_, w) = shape.rows_cols();
    let ell = (w as f64 / 8.0).max(1.0);
    let d = pts.len();
    DMatrix::from_fn(d, d, |i, j| {
        let (a, b) = (pts[i], pts[j]);
        let r2 = (a.0 - b.0).powi(2) + (a.1 - b.1).powi(2);
        amplitude * amplitude * (-r2 / (2.0 * ell * ell)).exp() + if i == j { NUGGET } else { 0.0 }
    })
}

/// The generating mixture (equal weights).
pub fn blob_prior(shape: SignalShape, n_templates: usize) -> Result<GaussianMixture> {
    if shape.is_empty() || shape.len() > MAX_DIM {
        return Err(Error::invalid(format!("signal dimension {} outside 1..={MAX_DIM}", shape.len())));
    }
    if n_templates == 0 {
        return Err(Error::invalid("need at least one template"));
    }
    let w = 1.0 / n_templates as f64;
    let comps = (0..n_templates)
        .map(|k| Component::new(w, template(shape, k, n_templates), smooth_cov(shape, 0.05 + 0.01 * k as f64)))
        .collect();
    GaussianMixture::new(comps)
}

pub fn generate_blob_dataset<R: Rng + ?Sized>(
    shape: SignalShape,
    n: usize,
    n_templates: usize,
    rng: &mut R,
) -> Result<BlobDataset> {
    let gmm = blob_prior(shape, n_templates)?;
    let samples = (0..n).map(|_| gmm.sample_one(rng)).collect();
    Ok(BlobDataset { shape, samples, gmm })
}

/// Writes one sample per CSV row, without a header.
pub fn write_samples(path: &Path, samples: &[DVector<f64>]) -> Result<()> {
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path)?;
    for s in samples {
        w.write_record(s.iter().map(|v| v.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples(path: &Path) -> Result<Vec<DVector<f64>>> {
    let mut r = csv::ReaderBuilder::new().has_headers(false).from_path(path)?;
    let mut out: Vec<DVector<f64>> = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let vals = rec?
            .iter()
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::invalid(format!("{}: row {}: {e}", path.display(), i + 1)))?;
        if let Some(first) = out.first() {
            if first.len() != vals.len() {
                return Err(Error::dims("sample row", first.len(), vals.len()));
            }
        }
        out.push(DVector::from_vec(vals));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn samples_stay_near_templates() {
        let shape = SignalShape::Line(16);
        let ds = generate_blob_dataset(shape, 2000, 3, &mut rng::derive(1, "data", 0)).unwrap();
        let lo = (0..3).map(|k| template(shape, k, 3).min()).fold(f64::INFINITY, f64::min);
        let hi = (0..3).map(|k| template(shape, k, 3).max()).fold(f64::NEG_INFINITY, f64::max);
        let sd = ds.gmm.components().iter().map(|c| c.cov.diagonal().max().sqrt()).fold(0.0, f64::max);
        for s in &ds.samples {
            assert!(s.min() >= lo - 4.0 * sd && s.max() <= hi + 4.0 * sd);
        }
    }

    #[test]
    fn empty_and_deterministic() {
        let shape = SignalShape::Grid { height: 4, width: 4 };
        let ds = generate_blob_dataset(shape, 0, 3, &mut rng::derive(1, "data", 0)).unwrap();
        assert!(ds.samples.is_empty());
        assert_eq!(ds.gmm.dim(), 16);
        let a = generate_blob_dataset(shape, 5, 3, &mut rng::derive(2, "data", 0)).unwrap();
        let b = generate_blob_dataset(shape, 5, 3, &mut rng::derive(2, "data", 0)).unwrap();
        assert_eq!(a.samples, b.samples);
    }

    #[test]
    fn rejects_oversized_signals() {
        let r = generate_blob_dataset(SignalShape::Line(257), 1, 3, &mut rng::derive(1, "data", 0));
        assert!(r.is_err());
    }

    #[test]
    fn samples_round_trip() {
        let ds = generate_blob_dataset(SignalShape::Line(8), 5, 2, &mut rng::derive(4, "data", 0)).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("s.csv");
        write_samples(&path, &ds.samples).unwrap();
        assert_eq!(read_samples(&path).unwrap(), ds.samples);
    }
}
