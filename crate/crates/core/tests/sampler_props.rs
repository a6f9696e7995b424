use flowlps::baselines::{
    preset_pure_langevin, preset_pure_proximal, run_solver, single_gradient_run, GuidanceConfig, SolverKind,
};
use flowlps::forward::simulate_measurement;
use flowlps::harness::bench::run_benchmark;
use flowlps::harness::config::ExperimentConfig;
use flowlps::harness::dataset::blob_prior;
use flowlps::harness::verify;
use flowlps::oracle::ula_stationary_covariance;
use flowlps::rng;
use flowlps::sampler::{euler_trajectory, langevin_phase, solve, time_schedule, Phase};
use flowlps::{Decoder, ForwardOperator, LpsConfig, Measurement, ProximalSolver, SignalShape};
use nalgebra::{DMatrix, DVector};

fn mean_pairwise_distance(xs: &[DVector<f64>]) -> f64 {
    let mut total = 0.0;
    let mut count = 0;
    for i in 0..xs.len() {
        for j in i + 1..xs.len() {
            total += (&xs[i] - &xs[j]).norm();
            count += 1;
        }
    }
    total / count as f64
}

#[test]
fn pure_langevin_spreads_while_pure_proximal_collapses() {
    let shape = SignalShape::Line(16);
    let prior = blob_prior(shape, 3).unwrap();
    let z = prior.sample_one(&mut rng::derive(1, "truth", 0));
    let meas = simulate_measurement(&z, &ForwardOperator::identity(16), &Decoder::Identity, 3e-4, &mut rng::derive(1, "noise", 0)).unwrap();
    let base = LpsConfig { n_total: 50, zeta: 1e-7, proximal: ProximalSolver::ExactRidge, ..LpsConfig::default() };
    let lang = preset_pure_langevin(&base);
    let prox = preset_pure_proximal(&base);
    let run = |cfg: &LpsConfig| -> Vec<DVector<f64>> {
        (0..100u64)
            .map(|s| solve(&meas, &prior, &LpsConfig { seed: s, ..cfg.clone() }).unwrap().reconstruction)
            .collect()
    };
    let spread_lang = mean_pairwise_distance(&run(&lang));
    let spread_prox = mean_pairwise_distance(&run(&prox));
    assert!(spread_lang >= 1e-3, "pure-langevin spread {spread_lang:.3e}");
    assert!(spread_prox < 1e-6, "pure-proximal spread {spread_prox:.3e}");
}

#[test]
fn single_gradient_lags_proximal_on_noiseless_identity() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ExperimentConfig::from_toml_str(&format!(
        r#"
        seed = 5
        instances = 50
        artifacts = 0
        sigma_n = 0.0
        out = "{}"
        [operator]
        kind = "identity"
        [sweep]
        solvers = ["pure-proximal", "single-gradient"]
        "#,
        dir.path().display()
    ))
    .unwrap();
    let report = run_benchmark(&cfg).unwrap();
    let (prox, grad) = (&report.summary[0], &report.summary[1]);
    assert_eq!(prox.solver, "pure-proximal");
    assert!(grad.mse > prox.mse, "single-gradient {:.3e} vs proximal {:.3e}", grad.mse, prox.mse);
}

#[test]
fn zero_guidance_is_unconditional_euler() {
    let prior = blob_prior(SignalShape::Line(8), 2).unwrap();
    let meas = Measurement::new(DVector::zeros(8), ForwardOperator::identity(8), Decoder::Identity, 0.1).unwrap();
    let g = GuidanceConfig { n_steps: 20, alpha: 3, step_size: 0.0, seed: 4 };
    let (states, _) = single_gradient_run(&meas, &prior, &g).unwrap();
    let euler = euler_trajectory(&prior, &states[0], 20, 3).unwrap();
    assert_eq!(states, euler);
}

#[test]
fn langevin_chain_matches_lyapunov_covariance() {
    let (sigma_n, t, zeta) = (0.1, 0.3, 2e-3);
    let a = DMatrix::from_row_slice(2, 2, &[0.9, -0.2, 0.4, 0.7]);
    let meas = Measurement::new(DVector::from_vec(vec![0.1, 0.2]), ForwardOperator::dense(a.clone()), Decoder::Identity, sigma_n).unwrap();
    let anchor = DVector::from_vec(vec![-0.3, 0.2]);
    let precision = a.tr_mul(&a) / (sigma_n * sigma_n) + DMatrix::identity(2, 2) / t;
    let target = ula_stationary_covariance(&precision, zeta).unwrap();
    let mut r = rng::derive(6, "ula", 0);
    let mut z = langevin_phase(&meas, &anchor, &anchor, t, 1000, zeta, &mut r).unwrap();
    let n = 50_000;
    let mut xs = Vec::with_capacity(n);
    for _ in 0..n {
        z = langevin_phase(&meas, &anchor, &z, t, 1, zeta, &mut r).unwrap();
        xs.push(z.clone());
    }
    let mean = xs.iter().fold(DVector::zeros(2), |acc, x| acc + x) / n as f64;
    let cov = xs.iter().fold(DMatrix::zeros(2, 2), |acc, x| acc + (x - &mean) * (x - &mean).transpose()) / (n - 1) as f64;
    assert!((&cov - &target).norm() / target.norm() < 0.05);
}

#[test]
fn pcn_preserves_standard_normal() {
    let r = verify::pcn_moments(20_000, 17);
    assert!(r.passed, "{}", r.detail);
}

#[test]
fn trajectory_records_every_phase_in_order() {
    let prior = blob_prior(SignalShape::Line(12), 3).unwrap();
    let z = prior.sample_one(&mut rng::derive(2, "truth", 0));
    let op = ForwardOperator::random_mask(12, 0.5, &mut rng::derive(2, "mask", 0)).unwrap();
    let meas = simulate_measurement(&z, &op, &Decoder::Identity, 0.05, &mut rng::derive(2, "noise", 0)).unwrap();
    let cfg = LpsConfig::default();
    let sol = solve(&meas, &prior, &cfg).unwrap();
    assert_eq!(sol.trajectory.len(), 40);
    let schedule = time_schedule(40, 3);
    for (k, step) in sol.trajectory.iter().enumerate() {
        assert_eq!(step.t, schedule[k]);
        let order: Vec<Phase> = step.phases.iter().map(|p| p.phase).collect();
        assert_eq!(order, [Phase::Tweedie, Phase::Pcn, Phase::Langevin, Phase::Proximal, Phase::Interp]);
    }
    assert_eq!(sol.final_state.t, 3.0 / 43.0);
}

#[test]
fn every_solver_is_deterministic_under_fixed_seed() {
    let prior = blob_prior(SignalShape::Line(10), 2).unwrap();
    let z = prior.sample_one(&mut rng::derive(3, "truth", 0));
    let meas = simulate_measurement(&z, &ForwardOperator::gaussian_blur(SignalShape::Line(10), 3, 1.0).unwrap(), &Decoder::Identity, 0.02, &mut rng::derive(3, "noise", 0)).unwrap();
    let base = LpsConfig { seed: 9, ..LpsConfig::default() };
    for kind in SolverKind::ALL {
        let a = run_solver(kind, &meas, &prior, &base, 0.1, None).unwrap();
        let b = run_solver(kind, &meas, &prior, &base, 0.1, None).unwrap();
        assert_eq!(a.reconstruction, b.reconstruction, "{kind}");
    }
}

#[test]
fn smooth_decoder_runs_with_gradient_proximal() {
    let d = 8;
    let prior = blob_prior(SignalShape::Line(d), 2).unwrap();
    let dec = Decoder::random_smooth(d, 0.2, &mut rng::derive(4, "dec", 0));
    let z = prior.sample_one(&mut rng::derive(4, "truth", 0));
    let op = ForwardOperator::random_mask(d, 0.5, &mut rng::derive(4, "mask", 0)).unwrap();
    let meas = simulate_measurement(&z, &op, &dec, 0.02, &mut rng::derive(4, "noise", 0)).unwrap();
    let sol = solve(&meas, &prior, &LpsConfig::default()).unwrap();
    assert!(sol.reconstruction.iter().all(|v| v.is_finite()));
    let ridge = LpsConfig { proximal: ProximalSolver::ExactRidge, ..LpsConfig::default() };
    assert!(solve(&meas, &prior, &ridge).is_err());
}
