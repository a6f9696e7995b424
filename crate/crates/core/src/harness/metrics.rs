use nalgebra::DVector;
use serde::{Deserialize, Serialize};

/// PSNR reported when the reconstruction is exact.
pub const PSNR_CAP_DB: f64 = 99.0;

pub fn mse(x: &DVector<f64>, reference: &DVector<f64>) -> f64 {
    (x - reference).norm_squared() / x.len() as f64
}

/// `10 log10(peak^2 / mse)`, capped at [`PSNR_CAP_DB`].
pub fn psnr_from_mse(mse: f64, peak: f64) -> f64 {
    if mse <= 0.0 {
        return PSNR_CAP_DB;
    }
    (10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB)
}

pub fn compute_psnr(x: &DVector<f64>, reference: &DVector<f64>, peak: f64) -> f64 {
    psnr_from_mse(mse(x, reference), peak)
}

pub fn median(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// One benchmark row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// Instance id, or `median` for summary rows.
    pub instance: String,
    pub solver: String,
    pub n_langevin: String,
    pub n_total: usize,
    pub rho_schedule: String,
    pub mse: f64,
    pub psnr_db: f64,
    pub residual_sq: f64,
    pub wall_s: f64,
    pub seed: u64,
}

pub const CSV_HEADER: &str = "instance,solver,n_langevin,n_total,rho_schedule,mse,psnr_db,residual_sq,wall_s,seed";
