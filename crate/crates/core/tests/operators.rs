use flowlps::forward::{gaussian_kernel, simulate_measurement};
use flowlps::oracle::finite_difference_gradient;
use flowlps::rng::{self, standard_normal};
use flowlps::{Decoder, ForwardOperator, Measurement, SignalShape};
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;

fn operators(seed: u64) -> Vec<ForwardOperator> {
    let mut r = rng::derive(seed, "ops", 0);
    let line = SignalShape::Line(18);
    let grid = SignalShape::Grid { height: 6, width: 4 };
    vec![
        ForwardOperator::identity(7),
        ForwardOperator::random_mask(18, 0.4, &mut r).unwrap(),
        ForwardOperator::mask(5, vec![4, 0, 2]).unwrap(),
        ForwardOperator::gaussian_blur(line, 7, 1.5).unwrap(),
        ForwardOperator::gaussian_blur(grid, 3, 0.7).unwrap(),
        ForwardOperator::downsample(line, 3).unwrap(),
        ForwardOperator::downsample(grid, 2).unwrap(),
        ForwardOperator::dense(DMatrix::from_fn(4, 9, |i, j| ((i * 9 + j) as f64 * 0.37).sin())),
    ]
}

#[test]
fn adjoint_identity_hundred_pairs_per_operator() {
    let mut r = rng::derive(11, "pairs", 0);
    for op in operators(1) {
        for _ in 0..100 {
            let x = standard_normal(&mut r, op.in_dim());
            let u = standard_normal(&mut r, op.out_dim());
            let lhs = op.apply(&x).unwrap().dot(&u);
            let rhs = x.dot(&op.adjoint(&u).unwrap());
            assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()), "{}: {lhs} vs {rhs}", op.name());
        }
    }
}

#[test]
fn dense_form_matches_matrix_free_application() {
    let mut r = rng::derive(12, "dense", 0);
    for op in operators(2) {
        let a = op.to_dense();
        let x = standard_normal(&mut r, op.in_dim());
        let u = standard_normal(&mut r, op.out_dim());
        assert!((&a * &x - op.apply(&x).unwrap()).amax() < 1e-12);
        assert!((a.tr_mul(&u) - op.adjoint(&u).unwrap()).amax() < 1e-12);
    }
}

#[test]
fn blur_preserves_mass_and_constants() {
    for (shape, size, sigma) in [
        (SignalShape::Line(20), 5, 1.0),
        (SignalShape::Grid { height: 5, width: 7 }, 3, 0.6),
        (SignalShape::Grid { height: 8, width: 8 }, 5, 2.0),
    ] {
        let op = ForwardOperator::gaussian_blur(shape, size, sigma).unwrap();
        let mut r = rng::derive(3, "blur", 0);
        let x = standard_normal(&mut r, shape.len());
        assert!((op.apply(&x).unwrap().sum() - x.sum()).abs() < 1e-10);
        let ones = DVector::from_element(shape.len(), 1.0);
        assert!((op.apply(&ones).unwrap() - &ones).amax() < 1e-12);
    }
    let k = gaussian_kernel(5, 1.0, true).unwrap();
    assert!((k.iter().sum::<f64>() - 1.0).abs() < 1e-14);
}

#[test]
fn fidelity_gradient_matches_finite_differences() {
    let mut r = rng::derive(4, "fd", 0);
    for op in operators(3) {
        let d = op.in_dim();
        for decoder in [Decoder::Identity, Decoder::random_smooth(d, 0.4, &mut r)] {
            let y = standard_normal(&mut r, op.out_dim());
            let meas = Measurement::new(y, op.clone(), decoder, 0.05).unwrap();
            let z = standard_normal(&mut r, d) * 0.7;
            let g = meas.data_fidelity_grad(&z).unwrap();
            let fd = finite_difference_gradient(|v| meas.data_fidelity(v).unwrap(), &z, 1e-5).unwrap();
            assert!((&g - &fd).amax() <= 1e-6 * (1.0 + g.amax()), "{} / {}", op.name(), meas.decoder.name());
        }
    }
}

#[test]
fn decoder_products_match_finite_differences() {
    let mut r = rng::derive(5, "dec", 0);
    let d = 6;
    let dec = Decoder::random_smooth(d, 0.8, &mut r);
    let z = standard_normal(&mut r, d);
    let u = standard_normal(&mut r, d);
    let v = standard_normal(&mut r, d);
    let h = 1e-6;
    let fd_jvp = (dec.decode(&(&z + &v * h)).unwrap() - dec.decode(&(&z - &v * h)).unwrap()) / (2.0 * h);
    assert!((dec.jvp(&z, &v).unwrap() - fd_jvp).amax() < 1e-8);
    let fd_vjp = finite_difference_gradient(|w| dec.decode(w).unwrap().dot(&u), &z, 1e-6).unwrap();
    assert!((dec.vjp(&z, &u).unwrap() - fd_vjp).amax() < 1e-8);
    assert!((dec.vjp(&z, &u).unwrap().dot(&v) - u.dot(&dec.jvp(&z, &v).unwrap())).abs() < 1e-12);
}

#[test]
fn noiseless_simulation_is_exact() {
    let op = ForwardOperator::downsample(SignalShape::Line(8), 2).unwrap();
    let z = DVector::from_fn(8, |i, _| i as f64);
    let m = simulate_measurement(&z, &op, &Decoder::Identity, 0.0, &mut rng::derive(0, "n", 0)).unwrap();
    assert_eq!(m.y, op.apply(&z).unwrap());
    assert_eq!(m.data_fidelity(&z).unwrap(), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn adjoint_identity_random_dense(rows in 1usize..7, cols in 1usize..7, seed in any::<u64>()) {
        let mut r = rng::derive(seed, "prop", 0);
        let a = DMatrix::from_column_slice(rows, cols, standard_normal(&mut r, rows * cols).as_slice());
        let op = ForwardOperator::dense(a);
        let x = standard_normal(&mut r, cols);
        let u = standard_normal(&mut r, rows);
        let lhs = op.apply(&x).unwrap().dot(&u);
        let rhs = x.dot(&op.adjoint(&u).unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn adjoint_identity_random_blur(n in 3usize..24, half in 0usize..3, sigma in 0.2f64..3.0, seed in any::<u64>()) {
        let size = (2 * half + 1).min(if n % 2 == 1 { n } else { n - 1 });
        let op = ForwardOperator::gaussian_blur(SignalShape::Line(n), size, sigma).unwrap();
        let mut r = rng::derive(seed, "prop-blur", 0);
        let x = standard_normal(&mut r, n);
        let u = standard_normal(&mut r, n);
        let lhs = op.apply(&x).unwrap().dot(&u);
        let rhs = x.dot(&op.adjoint(&u).unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn adjoint_identity_random_mask(n in 1usize..30, frac in 0.0f64..=1.0, seed in any::<u64>()) {
        let mut r = rng::derive(seed, "prop-mask", 0);
        let op = ForwardOperator::random_mask(n, frac, &mut r).unwrap();
        let x = standard_normal(&mut r, n);
        let u = standard_normal(&mut r, op.out_dim());
        let lhs = op.apply(&x).unwrap().dot(&u);
        let rhs = x.dot(&op.adjoint(&u).unwrap());
        prop_assert!((lhs - rhs).abs() <= 1e-12 * (1.0 + lhs.abs()));
    }
}
