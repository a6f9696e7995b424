use std::fs;
use std::path::Path;

use flowlps::harness::bench::{read_metrics_csv, run_benchmark, write_metrics_csv};
use flowlps::harness::config::{read_prior, write_prior, ExperimentConfig};
use flowlps::harness::dataset::{generate_blob_dataset, read_samples, write_samples};
use flowlps::harness::metrics::{MetricsRecord, CSV_HEADER};
use flowlps::prior::{fit_em, EmOptions};
use flowlps::rng;
use flowlps::SignalShape;

fn bench_config(out: &Path, extra: &str) -> ExperimentConfig {
    ExperimentConfig::from_toml_str(&format!(
        "seed = 11\ninstances = 50\nartifacts = 0\nout = \"{}\"\n{extra}",
        out.display()
    ))
    .unwrap()
}

#[test]
fn shipped_example_config_parses_to_defaults() {
    let path = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../docs/experiment.toml");
    let mut cfg = ExperimentConfig::load(&path).unwrap();
    let defaults = ExperimentConfig::default();
    assert_eq!(cfg.variants().unwrap(), defaults.variants().unwrap());
    cfg.lps = Default::default();
    assert_eq!(cfg, defaults);
}

#[test]
fn csv_round_trip_with_awkward_values() {
    let rows = vec![
        MetricsRecord {
            instance: "0".into(),
            solver: "flowlps".into(),
            n_langevin: "6->1".into(),
            n_total: 15,
            rho_schedule: "const(0.5)".into(),
            mse: 1.234_567_890_123e-5,
            psnr_db: 49.08,
            residual_sq: 0.0,
            wall_s: 0.0,
            seed: u64::MAX,
        },
        MetricsRecord {
            instance: "median".into(),
            solver: "single-gradient".into(),
            n_langevin: "0".into(),
            n_total: 1,
            rho_schedule: "one-minus-sigma".into(),
            mse: 0.1 + 0.2,
            psnr_db: 99.0,
            residual_sq: f64::MIN_POSITIVE,
            wall_s: 1.5,
            seed: 0,
        },
    ];
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    write_metrics_csv(&path, &rows).unwrap();
    let text = fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
    assert_eq!(read_metrics_csv(&path).unwrap(), rows);
}

#[test]
fn n_langevin_sweep_row_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = bench_config(dir.path(), "[sweep]\nn_langevin = [0, 5, 15]");
    let report = run_benchmark(&cfg).unwrap();
    assert_eq!(report.rows.len(), 150);
    assert_eq!(report.summary.len(), 3);
    let labels: Vec<&str> = report.summary.iter().map(|r| r.n_langevin.as_str()).collect();
    assert_eq!(labels, ["0", "5", "15"]);
    let csv = read_metrics_csv(&dir.path().join("metrics.csv")).unwrap();
    assert_eq!(csv.len(), 153);
    let ids: Vec<usize> = csv[..150].iter().map(|r| r.instance.parse().unwrap()).collect();
    assert!(ids.windows(2).all(|w| w[0] <= w[1]));
    assert!(csv[150..].iter().all(|r| r.instance == "median" && r.seed == 11));
}

#[test]
fn rho_sweep_gives_four_summaries() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = bench_config(
        dir.path(),
        "[sweep]\nrho = [0.0, 0.5, \"one-minus-sigma\", \"sqrt-one-minus-sigma\"]",
    );
    let cfg = ExperimentConfig { instances: 5, ..cfg };
    let report = run_benchmark(&cfg).unwrap();
    let labels: Vec<&str> = report.summary.iter().map(|r| r.rho_schedule.as_str()).collect();
    assert_eq!(labels, ["zero", "const(0.5)", "one-minus-sigma", "sqrt-one-minus-sigma"]);
}

#[test]
fn empty_sweep_is_single_default_run() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig { instances: 3, ..bench_config(dir.path(), "") };
    let report = run_benchmark(&cfg).unwrap();
    assert_eq!(report.variants.len(), 1);
    assert_eq!(report.rows.len(), 3);
    let s = &report.summary[0];
    assert_eq!((s.solver.as_str(), s.n_langevin.as_str(), s.n_total), ("flowlps", "5", 15));
}

#[test]
fn dataset_and_prior_files_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_blob_dataset(SignalShape::Grid { height: 3, width: 4 }, 400, 2, &mut rng::derive(2, "d", 0)).unwrap();
    let data = dir.path().join("data.csv");
    write_samples(&data, &ds.samples).unwrap();
    let back = read_samples(&data).unwrap();
    assert_eq!(back, ds.samples);
    let fit = fit_em(&back, 2, &EmOptions::default(), &mut rng::derive(2, "em", 0)).unwrap();
    let prior = dir.path().join("prior.toml");
    write_prior(&prior, &fit).unwrap();
    assert_eq!(read_prior(&prior).unwrap().components(), fit.components());
}

#[test]
fn fitted_and_file_priors_drive_a_benchmark() {
    let dir = tempfile::tempdir().unwrap();
    let ds = generate_blob_dataset(SignalShape::Line(32), 10, 3, &mut rng::derive(3, "d", 0)).unwrap();
    let prior_path = dir.path().join("prior.toml");
    write_prior(&prior_path, &ds.gmm).unwrap();
    let out_file = dir.path().join("file");
    let from_file = ExperimentConfig {
        instances: 2,
        ..bench_config(&out_file, &format!("[prior]\nsource = \"file\"\npath = \"{}\"", prior_path.display()))
    };
    let out_true = dir.path().join("true");
    let from_truth = ExperimentConfig { instances: 2, ..bench_config(&out_true, "") };
    assert_eq!(run_benchmark(&from_file).unwrap().rows, run_benchmark(&from_truth).unwrap().rows);

    let out_em = dir.path().join("em");
    let em = ExperimentConfig { instances: 2, ..bench_config(&out_em, "[prior]\nsource = \"fit_em\"\nk = 2") };
    let rows = run_benchmark(&em).unwrap().rows;
    assert!(rows.iter().all(|r| r.mse.is_finite()));
}
