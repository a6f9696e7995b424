//! Benchmark runs and their artifacts.
//!
//! Output layout under the configured directory:
//! `metrics.csv`, `trajectories/<instance>_<variant>.jsonl` and
//! `renders/<instance>_{truth,observed,<variant>}.pgm`.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::Serialize;

use crate::baselines::run_solver;
use crate::forward::{simulate_measurement, Decoder, ForwardOperator, Measurement, SignalShape};
use crate::harness::config::{
    inline_prior, read_prior, DecoderKind, ExperimentConfig, MaskKeep, OperatorKind, PriorSource, Variant,
};
use crate::harness::dataset::{blob_prior, read_samples};
use crate::harness::metrics::{median, mse, psnr_from_mse, MetricsRecord};
use crate::prior::{fit_em, EmOptions, GaussianMixture};
use crate::rng::{self, role};
use crate::sampler::{Phase, StepRecord};
use crate::{Error, Result};

/// Everything shared by the instances of one experiment.
#[derive(Debug, Clone)]
pub struct Problem {
    pub shape: SignalShape,
    /// Generating distribution of the ground-truth latents.
    pub truth_prior: GaussianMixture,
    /// Prior handed to the solvers.
    pub solver_prior: GaussianMixture,
    pub decoder: Decoder,
}

#[derive(Debug, Clone)]
pub struct Instance {
    pub index: usize,
    pub seed: u64,
    pub truth: DVector<f64>,
    pub meas: Measurement,
}

impl Problem {
    pub fn build(cfg: &ExperimentConfig) -> Result<Self> {
        cfg.validate()?;
        let shape = cfg.shape()?;
        let d = shape.len();
        let truth_prior = blob_prior(shape, cfg.data.templates)?;
        let solver_prior = match cfg.prior.source {
            PriorSource::True => truth_prior.clone(),
            PriorSource::Inline => inline_prior(&cfg.prior)?,
            PriorSource::File => read_prior(cfg.prior.path.as_deref().expect("validated"))?,
            PriorSource::FitEm => {
                let data = match &cfg.prior.path {
                    Some(p) => read_samples(p)?,
                    None => truth_prior.sample(&mut rng::derive(cfg.seed, role::DATASET, 0), cfg.prior.train_samples)?,
                };
                fit_em(&data, cfg.prior.k, &EmOptions::default(), &mut rng::derive(cfg.seed, role::EM, 0))?
            }
        };
        if solver_prior.dim() != d {
            return Err(Error::Config(format!("prior has dimension {}, signal has {d}", solver_prior.dim())));
        }
        let decoder = match cfg.decoder.kind {
            DecoderKind::Identity => Decoder::Identity,
            DecoderKind::Smooth => {
                Decoder::random_smooth(d, cfg.decoder.gain, &mut rng::derive(cfg.seed, role::DECODER, 0))
            }
        };
        Ok(Self { shape, truth_prior, solver_prior, decoder })
    }

    fn operator(&self, cfg: &ExperimentConfig, seed: u64) -> Result<ForwardOperator> {
        let d = self.shape.len();
        let op = &cfg.operator;
        let mut rng = rng::derive(seed, role::MASK, 0);
        match op.kind {
            OperatorKind::Identity => Ok(ForwardOperator::identity(d)),
            OperatorKind::Mask => match &op.mask_keep {
                MaskKeep::Fraction(f) => ForwardOperator::random_mask(d, *f, &mut rng),
                MaskKeep::Indices(idx) => ForwardOperator::mask(d, idx.clone()),
            },
            OperatorKind::Blur => ForwardOperator::gaussian_blur(self.shape, op.kernel_size, op.kernel_sigma),
            OperatorKind::Downsample => ForwardOperator::downsample(self.shape, op.factor),
            OperatorKind::Dense => {
                let normal = Normal::new(0.0, 1.0 / (op.rows as f64).sqrt()).expect("positive scale");
                Ok(ForwardOperator::dense(DMatrix::from_fn(op.rows, d, |_, _| normal.sample(&mut rng))))
            }
        }
    }

    /// Ground truth and measurement of instance `index`, a function of
    /// the instance seed alone.
    pub fn instance(&self, cfg: &ExperimentConfig, index: usize) -> Result<Instance> {
        let seed = rng::instance_seed(cfg.seed, index as u64);
        let z_true = self.truth_prior.sample_one(&mut rng::derive(seed, role::TRUTH, 0));
        let op = self.operator(cfg, seed)?;
        let meas = simulate_measurement(
            &z_true,
            &op,
            &self.decoder,
            cfg.sigma_n,
            &mut rng::derive(seed, role::NOISE, 0),
        )?;
        let truth = self.decoder.decode(&z_true)?;
        Ok(Instance { index, seed, truth, meas })
    }
}

/// Result of one (instance, variant) run.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub record: MetricsRecord,
    pub reconstruction: DVector<f64>,
    pub trajectory: Option<Vec<StepRecord>>,
}

pub fn run_variant(
    cfg: &ExperimentConfig,
    problem: &Problem,
    inst: &Instance,
    variant: &Variant,
) -> Result<RunOutput> {
    let mut lps = variant.lps.clone();
    lps.seed = inst.seed;
    let start = Instant::now();
    let out = run_solver(variant.solver, &inst.meas, &problem.solver_prior, &lps, cfg.guidance_step, Some(&inst.truth))?;
    let wall_s = if cfg.timing { start.elapsed().as_secs_f64() } else { 0.0 };
    let err = mse(&out.reconstruction, &inst.truth);
    let residual_sq = (&inst.meas.y - inst.meas.operator.apply(&out.reconstruction)?).norm_squared();
    let record = MetricsRecord {
        instance: inst.index.to_string(),
        solver: variant.solver.to_string(),
        n_langevin: variant.n_langevin_label(),
        n_total: variant.n_total(),
        rho_schedule: variant.rho_label(),
        mse: err,
        psnr_db: psnr_from_mse(err, cfg.peak),
        residual_sq,
        wall_s,
        seed: inst.seed,
    };
    Ok(RunOutput { record, reconstruction: out.reconstruction, trajectory: out.solution.map(|s| s.trajectory) })
}

#[derive(Serialize)]
struct TrajectoryLine {
    step: usize,
    t: f64,
    phase: Phase,
    residual_sq: f64,
    anchor_dist_sq: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    mse_true: Option<f64>,
}

/// One JSON object per phase of every flow step.
pub fn write_trajectory(path: &Path, trajectory: &[StepRecord]) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for step in trajectory {
        for p in &step.phases {
            let line = TrajectoryLine {
                step: step.step,
                t: step.t,
                phase: p.phase,
                residual_sq: p.residual_sq,
                anchor_dist_sq: p.anchor_dist_sq,
                mse_true: p.mse_true,
            };
            serde_json::to_writer(&mut w, &line)?;
            w.write_all(b"\n")?;
        }
    }
    w.flush()?;
    Ok(())
}

/// Binary 8-bit graymap; values are clamped to `[0, peak]` and scaled to 255.
pub fn pgm_bytes(shape: SignalShape, x: &DVector<f64>, peak: f64) -> Result<Vec<u8>> {
    if x.len() != shape.len() {
        return Err(Error::dims("render", shape.len(), x.len()));
    }
    let (h, w) = shape.rows_cols();
    let mut bytes = format!("P5\n{w} {h}\n255\n").into_bytes();
    bytes.extend(x.iter().map(|v| (v.clamp(0.0, peak) / peak * 255.0).round() as u8));
    Ok(bytes)
}

pub fn write_pgm(path: &Path, shape: SignalShape, x: &DVector<f64>, peak: f64) -> Result<()> {
    fs::write(path, pgm_bytes(shape, x, peak)?)?;
    Ok(())
}

pub fn write_metrics_csv(path: &Path, rows: &[MetricsRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metrics_csv(path: &Path) -> Result<Vec<MetricsRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    r.deserialize().map(|row| row.map_err(Error::from)).collect()
}

/// Median of every metric per variant, labelled `median`.
pub fn summarize(rows: &[MetricsRecord], variants: &[Variant], master_seed: u64) -> Vec<MetricsRecord> {
    let n_var = variants.len();
    (0..n_var)
        .map(|v| {
            let group: Vec<&MetricsRecord> = rows.iter().skip(v).step_by(n_var).collect();
            let col = |f: fn(&MetricsRecord) -> f64| median(&group.iter().map(|r| f(r)).collect::<Vec<_>>());
            let first = group[0];
            MetricsRecord {
                instance: "median".into(),
                solver: first.solver.clone(),
                n_langevin: first.n_langevin.clone(),
                n_total: first.n_total,
                rho_schedule: first.rho_schedule.clone(),
                mse: col(|r| r.mse),
                psnr_db: col(|r| r.psnr_db),
                residual_sq: col(|r| r.residual_sq),
                wall_s: col(|r| r.wall_s),
                seed: master_seed,
            }
        })
        .collect()
}

#[derive(Debug, Clone)]
pub struct BenchReport {
    /// Per-instance rows, sorted by instance then variant.
    pub rows: Vec<MetricsRecord>,
    /// One median row per variant.
    pub summary: Vec<MetricsRecord>,
    pub variants: Vec<Variant>,
}

/// Thread pool sized by `LPS_THREADS` (unset or 0 = one per core).
pub fn thread_pool() -> Result<rayon::ThreadPool> {
    let n = match std::env::var("LPS_THREADS") {
        Ok(v) => v.trim().parse::<usize>().map_err(|_| Error::Config(format!("LPS_THREADS=`{v}` is not a count")))?,
        Err(_) => 0,
    };
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

fn instance_artifacts(
    cfg: &ExperimentConfig,
    problem: &Problem,
    inst: &Instance,
    runs: &[(Variant, RunOutput)],
    out: &Path,
) -> Result<()> {
    let id = format!("{:04}", inst.index);
    let renders = out.join("renders");
    let trajectories = out.join("trajectories");
    write_pgm(&renders.join(format!("{id}_truth.pgm")), problem.shape, &inst.truth, cfg.peak)?;
    let observed = inst.meas.operator.adjoint(&inst.meas.y)?;
    write_pgm(&renders.join(format!("{id}_observed.pgm")), problem.shape, &observed, cfg.peak)?;
    for (variant, run) in runs {
        let tag = variant.tag();
        write_pgm(&renders.join(format!("{id}_{tag}.pgm")), problem.shape, &run.reconstruction, cfg.peak)?;
        if let Some(traj) = &run.trajectory {
            write_trajectory(&trajectories.join(format!("{id}_{tag}.jsonl")), traj)?;
        }
    }
    Ok(())
}

/// Runs every variant on every instance and writes the artifacts to `cfg.out`.
pub fn run_benchmark(cfg: &ExperimentConfig) -> Result<BenchReport> {
    let problem = Problem::build(cfg)?;
    let variants = cfg.variants()?;
    let out = cfg.out.as_path();
    fs::create_dir_all(out.join("renders"))?;
    fs::create_dir_all(out.join("trajectories"))?;
    let pool = thread_pool()?;
    let per_instance: Vec<Vec<MetricsRecord>> = pool.install(|| {
        (0..cfg.instances)
            .into_par_iter()
            .map(|i| {
                let inst = problem.instance(cfg, i)?;
                let runs = variants
                    .iter()
                    .map(|v| Ok((v.clone(), run_variant(cfg, &problem, &inst, v)?)))
                    .collect::<Result<Vec<_>>>()?;
                if i < cfg.artifacts {
                    instance_artifacts(cfg, &problem, &inst, &runs, out)?;
                }
                Ok(runs.into_iter().map(|(_, r)| r.record).collect())
            })
            .collect::<Result<Vec<_>>>()
    })?;
    let rows: Vec<MetricsRecord> = per_instance.into_iter().flatten().collect();
    let summary = summarize(&rows, &variants, cfg.seed);
    let mut all = rows.clone();
    all.extend(summary.iter().cloned());
    write_metrics_csv(&out.join("metrics.csv"), &all)?;
    Ok(BenchReport { rows, summary, variants })
}

/// Solves instance 0 with the configured solver (sweeps are ignored) and
/// writes its metrics row, trajectory, renders and reconstruction.
pub fn run_solve(cfg: &ExperimentConfig) -> Result<RunOutput> {
    let mut single = cfg.clone();
    single.sweep = Default::default();
    let problem = Problem::build(&single)?;
    let variant = single.variants()?.remove(0);
    let inst = problem.instance(&single, 0)?;
    let run = run_variant(&single, &problem, &inst, &variant)?;
    let out = single.out.as_path();
    fs::create_dir_all(out)?;
    write_metrics_csv(&out.join("metrics.csv"), std::slice::from_ref(&run.record))?;
    if let Some(traj) = &run.trajectory {
        write_trajectory(&out.join("trajectory.jsonl"), traj)?;
    }
    write_pgm(&out.join("truth.pgm"), problem.shape, &inst.truth, single.peak)?;
    write_pgm(&out.join("observed.pgm"), problem.shape, &inst.meas.operator.adjoint(&inst.meas.y)?, single.peak)?;
    write_pgm(&out.join("reconstruction.pgm"), problem.shape, &run.reconstruction, single.peak)?;
    crate::harness::dataset::write_samples(&out.join("reconstruction.csv"), std::slice::from_ref(&run.reconstruction))?;
    Ok(run)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small(dir: &Path) -> ExperimentConfig {
        ExperimentConfig::from_toml_str(&format!(
            r#"
            seed = 3
            instances = 4
            artifacts = 2
            out = "{}"
            [data]
            shape = [4, 4]
            [lps]
            n_steps = 8
            [sweep]
            n_langevin = [0, 5]
            "#,
            dir.display()
        ))
        .unwrap()
    }

    #[test]
    fn bench_writes_rows_summary_and_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let report = run_benchmark(&small(dir.path())).unwrap();
        assert_eq!(report.rows.len(), 8);
        assert_eq!(report.summary.len(), 2);
        let back = read_metrics_csv(&dir.path().join("metrics.csv")).unwrap();
        assert_eq!(back.len(), 10);
        assert_eq!(back[..8], report.rows[..]);
        assert_eq!(back[8].instance, "median");
        let header = fs::read_to_string(dir.path().join("metrics.csv")).unwrap();
        assert!(header.starts_with(crate::harness::metrics::CSV_HEADER));
        assert_eq!(fs::read_dir(dir.path().join("trajectories")).unwrap().count(), 4);
        assert_eq!(fs::read_dir(dir.path().join("renders")).unwrap().count(), 8);
    }

    #[test]
    fn rows_reproducible_from_seed() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = small(dir.path());
        let report = run_benchmark(&cfg).unwrap();
        let problem = Problem::build(&cfg).unwrap();
        let inst = problem.instance(&cfg, 3).unwrap();
        assert_eq!(inst.seed, report.rows[6].seed);
        let again = run_variant(&cfg, &problem, &inst, &report.variants[0]).unwrap();
        assert_eq!(again.record, report.rows[6]);
    }

    #[test]
    fn pgm_clamps_and_scales() {
        let x = DVector::from_vec(vec![-0.5, 0.0, 0.5, 1.0, 2.0, 0.25]);
        let b = pgm_bytes(SignalShape::Grid { height: 2, width: 3 }, &x, 1.0).unwrap();
        assert_eq!(&b[..11], b"P5\n3 2\n255\n");
        assert_eq!(&b[11..], &[0, 0, 128, 255, 255, 64]);
    }

    #[test]
    fn unwritable_output_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let blocker = dir.path().join("file");
        fs::write(&blocker, b"x").unwrap();
        let cfg = small(&blocker.join("sub"));
        assert!(matches!(run_benchmark(&cfg), Err(Error::Io(_))));
    }
}
