use std::io;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use flowlps::harness::bench::{run_benchmark, run_solve};
use flowlps::harness::config::{write_prior, ExperimentConfig};
use flowlps::harness::dataset::{generate_blob_dataset, read_samples, write_samples};
use flowlps::harness::verify::{verify_suite, Level};
use flowlps::prior::{fit_em, EmOptions};
use flowlps::rng::{self, role};
use flowlps::{Error, Result, SignalShape};

#[derive(Parser)]
#[command(name = "flowlps", version, about = "Langevin-proximal posterior sampling over analytic flow priors")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve one instance and write its metrics, trajectory and renders.
    Solve {
        #[arg(long)]
        config: PathBuf,
        /// Override the master seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Override the output directory.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run every configured solver and sweep setting over all instances.
    Bench {
        #[arg(long)]
        config: PathBuf,
    },
    /// Run the oracle checks; prints one JSON line per check.
    Verify {
        #[arg(long, default_value = "fast")]
        level: String,
    },
    /// Sample a synthetic dataset to CSV (one signal per row).
    MakeData {
        /// `N` for a line signal or `HxW` for a grid.
        #[arg(long)]
        shape: String,
        #[arg(long)]
        n: usize,
        #[arg(long, default_value_t = 3)]
        templates: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Also write the generating mixture as a prior file.
        #[arg(long)]
        prior_out: Option<PathBuf>,
    },
    /// Fit a Gaussian mixture to a CSV dataset by EM.
    FitPrior {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        k: usize,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn parse_shape(s: &str) -> Result<SignalShape> {
    let bad = || Error::Config(format!("shape `{s}` must look like `32` or `8x8`"));
    match s.split_once(['x', 'X']) {
        Some((h, w)) => Ok(SignalShape::Grid {
            height: h.trim().parse().map_err(|_| bad())?,
            width: w.trim().parse().map_err(|_| bad())?,
        }),
        None => Ok(SignalShape::Line(s.trim().parse().map_err(|_| bad())?)),
    }
}

fn run(cli: Cli) -> Result<bool> {
    match cli.command {
        Command::Solve { config, seed, out } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(o) = out {
                cfg.out = o;
            }
            let run = run_solve(&cfg)?;
            let r = &run.record;
            println!(
                "{} mse={:.6e} psnr_db={:.3} residual_sq={:.6e} -> {}",
                r.solver,
                r.mse,
                r.psnr_db,
                r.residual_sq,
                cfg.out.display()
            );
        }
        Command::Bench { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            let report = run_benchmark(&cfg)?;
            for s in &report.summary {
                println!(
                    "{} n_langevin={} n_total={} rho={} median_mse={:.6e} median_psnr_db={:.3}",
                    s.solver, s.n_langevin, s.n_total, s.rho_schedule, s.mse, s.psnr_db
                );
            }
            println!("{} rows -> {}", report.rows.len(), cfg.out.join("metrics.csv").display());
        }
        Command::Verify { level } => {
            let level: Level = level.parse()?;
            return verify_suite(level, &mut io::stdout().lock());
        }
        Command::MakeData { shape, n, templates, seed, out, prior_out } => {
            let shape = parse_shape(&shape)?;
            let ds = generate_blob_dataset(shape, n, templates, &mut rng::derive(seed, role::DATASET, 0))?;
            write_samples(&out, &ds.samples)?;
            if let Some(p) = prior_out {
                write_prior(&p, &ds.gmm)?;
            }
            println!("{n} samples of dimension {} -> {}", shape.len(), out.display());
        }
        Command::FitPrior { data, k, out, seed } => {
            let samples = read_samples(&data)?;
            let gmm = fit_em(&samples, k, &EmOptions::default(), &mut rng::derive(seed, role::EM, 0))?;
            write_prior(&out, &gmm)?;
            println!("fitted {k} components on {} samples -> {}", samples.len(), out.display());
        }
    }
    Ok(true)
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::FAILURE,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
