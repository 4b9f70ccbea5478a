mod common;

use std::f64::consts::{PI, TAU};

use common::rng;
use kronmtgp::error::Error;
use kronmtgp::problems::*;
use proptest::prelude::*;
use rand::Rng;

fn spill(m: f64, d: f64, s: f64, t: f64) -> f64 {
    if t <= 0.0 {
        return 0.0;
    }
    m * (-(s * s) / (4.0 * d * t)).exp() / (4.0 * PI * d * t).sqrt()
}

fn random_pollutant_params(r: &mut impl Rng) -> [f64; 4] {
    std::array::from_fn(|i| POLLUTANT_LOWER[i] + r.random::<f64>() * (POLLUTANT_UPPER[i] - POLLUTANT_LOWER[i]))
}

#[test]
fn pollutant_matches_the_scalar_formula() {
    let p = PollutantProblem::default();
    let mut r = rng(1);
    for _ in 0..50 {
        let x = random_pollutant_params(&mut r);
        let grid = p.evaluate(&x).unwrap();
        assert_eq!(grid.len(), 12);
        for (i, &s) in p.locations.iter().enumerate() {
            for (j, &t) in p.times.iter().enumerate() {
                let want = spill(x[0], x[1], s, t) + spill(x[0], x[1], s - x[2], t - x[3]);
                let got = grid[i * p.times.len() + j];
                assert!((got - want).abs() <= 1e-12 * want.abs().max(1.0), "({s}, {t}): {got} vs {want}");
                assert_eq!(got, pollutant_concentration(s, t, &x));
            }
        }
    }
}

#[test]
fn pollutant_objective_peaks_at_the_truth() {
    let p = PollutantProblem::default();
    assert_eq!(p.objective(&p.evaluate(&p.true_params).unwrap()), 0.0);
    assert_eq!(p.target(), p.evaluate(&p.true_params).unwrap().as_slice());
    let mut r = rng(2);
    for _ in 0..10_000 {
        let x = random_pollutant_params(&mut r);
        assert!(p.objective(&p.evaluate(&x).unwrap()) < 0.0);
    }
}

#[test]
fn pollutant_rejects_points_outside_the_box() {
    let p = PollutantProblem::default();
    assert!(matches!(p.evaluate(&[10.0, 0.07, 1.5]), Err(Error::Domain(_))));
    assert!(p.evaluate(&[10.0, 0.2, 1.5, 30.1]).is_err());
    assert!(p.evaluate(&[10.0, 0.07, 1.5, f64::NAN]).is_err());
    assert_eq!(pollutant_eval(&p.true_params).unwrap(), p.target());
}

#[test]
fn hartmann_recovers_the_known_minimum() {
    let h = HartmannMtProblem::with_slices(vec![HARTMANN6_ARGMIN[5]]).unwrap();
    let y = h.evaluate(&HARTMANN6_ARGMIN[..5]).unwrap();
    assert!((y[0] - HARTMANN6_MIN).abs() < 1e-4, "{}", y[0]);
    assert!((h.objective(&y) + HARTMANN6_MIN).abs() < 1e-4);
    assert!((hartmann6(&HARTMANN6_ARGMIN) - HARTMANN6_MIN).abs() < 1e-4);
    assert!(HartmannMtProblem::with_slices(vec![]).is_err());
    assert!(HartmannMtProblem::with_slices(vec![1.5]).is_err());
    assert!(HartmannMtProblem::new(0).is_err());
}

#[test]
fn hartmann_tasks_are_slices_of_the_scalar_function() {
    let h = HartmannMtProblem::new(5).unwrap();
    assert_eq!(h.tasks(), 5);
    let mut r = rng(3);
    for _ in 0..100 {
        let x: Vec<f64> = (0..5).map(|_| r.random()).collect();
        let y = h.evaluate(&x).unwrap();
        for (k, &c) in h.slices.iter().enumerate() {
            assert_eq!(y[k], hartmann6(&[x[0], x[1], x[2], x[3], x[4], c]));
        }
        let mean = y.iter().sum::<f64>() / 5.0;
        assert!((h.objective(&y) + mean).abs() < 1e-15);
    }
}

#[test]
fn wave_field_matches_the_separable_formula() {
    let w = WaveFieldProblem::new(5, 7).unwrap();
    let p = [0.35, 0.1, 0.8, 0.45];
    let f = w.evaluate(&p).unwrap();
    for i in 0..5 {
        for j in 0..7 {
            let want = (TAU * (p[0] * i as f64 / 5.0 + p[1])).sin() * (TAU * (p[2] * j as f64 / 7.0 + p[3])).cos();
            assert!((f[i * 7 + j] - want).abs() < 1e-14);
        }
    }
    assert_eq!(w.output_dims(), vec![5, 7]);
    assert!(WaveFieldProblem::new(0, 3).is_err());
    assert!(wave_field_eval(&[1.2, 0.0, 0.5, 0.0], 4, 4).is_err());
    assert!(wave_field_eval(&[0.2, f64::INFINITY, 0.5, 0.0], 4, 4).is_err());
    assert_eq!(w.objective(&w.evaluate(&w.true_params).unwrap()), 0.0);
}

#[test]
fn registry_builds_each_problem() {
    for (name, dim, outputs) in [("pollutant", 4, 12), ("wave_field", 4, 256), ("hartmann_mt", 5, 4), ("hartmann_mt:2", 5, 2)] {
        let p = problem_by_name(name).unwrap();
        assert_eq!((p.dim(), p.outputs()), (dim, outputs), "{name}");
    }
    assert!(matches!(problem_by_name("hartmann_mt:x"), Err(Error::Config(_))));
    assert!(problem_by_name("hartmann_mt:0").is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn pollutant_is_linear_in_mass(seed in 0u64..100_000, scale in 0.6f64..1.0) {
        let mut x = random_pollutant_params(&mut rng(seed));
        x[0] = POLLUTANT_UPPER[0] * scale.max(POLLUTANT_LOWER[0] / POLLUTANT_UPPER[0]);
        let a = pollutant_eval(&x).unwrap();
        let mut y = x;
        y[0] = POLLUTANT_LOWER[0];
        let b = pollutant_eval(&y).unwrap();
        let ratio = x[0] / y[0];
        for (u, v) in a.iter().zip(&b) {
            prop_assert!((u - ratio * v).abs() <= 1e-12 * u.abs().max(1e-300));
        }
    }

    #[test]
    fn wave_field_is_periodic_in_the_phases(a in 0.0f64..1.0, b in -3.0f64..3.0, c in 0.0f64..1.0, d in -3.0f64..3.0, k in -3i32..4) {
        let base = wave_field_eval(&[a, b, c, d], 6, 6).unwrap();
        let shifted = wave_field_eval(&[a, b + k as f64, c, d - k as f64], 6, 6).unwrap();
        for (u, v) in base.iter().zip(&shifted) {
            prop_assert!((u - v).abs() < 1e-12);
        }
        prop_assert_eq!(&base, &wave_field_eval(&[a, b, c, d], 6, 6).unwrap());
        prop_assert!(base.iter().all(|v| v.abs() <= 1.0));
    }

    #[test]
    fn duplicate_hartmann_slices_agree(x in proptest::collection::vec(0.0f64..1.0, 5), c in 0.0f64..1.0) {
        let y = hartmann_mt_eval(&x, &[c, c, c]).unwrap();
        prop_assert!(y[0] == y[1] && y[1] == y[2]);
        prop_assert!(y[0] < 0.0 && y[0] >= HARTMANN6_MIN - 1e-4);
    }
}
