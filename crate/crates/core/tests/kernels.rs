mod common;

use common::*;
use kronmtgp::gp::{GpParts, InputScaling, KronGp, OutputScaling};
use kronmtgp::kernels::{
    log_prior, matern25, matern25_grad, matern25_sym, task_cov, GammaPrior, LkjPrior, MaternKernel, PriorInput, PriorSet,
    TaskCovFactor,
};
use nalgebra::DMatrix;
use proptest::prelude::*;
use rand::Rng;
use statrs::distribution::{Continuous, Gamma};

#[test]
fn matches_scalar_matern_formula() {
    let mut r = rng(1);
    for d in 1..5 {
        let x = uniform_matrix(&mut r, 9, d);
        let z = uniform_matrix(&mut r, 6, d);
        let ls: Vec<f64> = (0..d).map(|_| 0.1 + r.random::<f64>()).collect();
        let k = MaternKernel::new(ls.clone(), 1.7).unwrap();
        let got = matern25(&x, &z, &k).unwrap();
        assert!((got - matern(&x, &z, &ls, 1.7)).amax() < 1e-12);
        let s = matern25_sym(&x, &k).unwrap();
        assert!((s.as_matrix() - matern(&x, &x, &ls, 1.7)).amax() < 1e-12);
    }
}

#[test]
fn single_point_and_distant_points() {
    let k = MaternKernel::isotropic(2, 0.3, 2.5).unwrap();
    let x = DMatrix::from_row_slice(1, 2, &[0.4, 0.1]);
    assert_eq!(matern25_sym(&x, &k).unwrap().as_matrix()[(0, 0)], 2.5);
    let far = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 1e3, 1e3]);
    assert!(matern25_sym(&far, &k).unwrap().as_matrix()[(0, 1)].abs() < 1e-300);
}

#[test]
fn rejects_bad_hyperparameters() {
    assert!(MaternKernel::new(vec![], 1.0).is_err());
    assert!(MaternKernel::new(vec![0.0], 1.0).is_err());
    assert!(MaternKernel::new(vec![1.0], -1.0).is_err());
    assert!(TaskCovFactor::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0])).is_err());
    assert!(GammaPrior::new(0.0, 1.0).is_err());
}

#[test]
fn gamma_prior_matches_reference_density() {
    let p = GammaPrior::new(1.1, 0.05).unwrap();
    let oracle = Gamma::new(1.1, 0.05).unwrap();
    for x in [1.0, 0.01, 3.5, 40.0] {
        assert!((p.ln_pdf(x).unwrap() - oracle.ln_pdf(x)).abs() < 1e-10);
    }
    assert!(p.ln_pdf(0.0).is_err());
    assert!(p.ln_pdf(-1.0).is_err());
}

#[test]
fn lkj_reference_values() {
    let mut r = rng(2);
    let k = random_spd(&mut r, 4, 0.1);
    assert_eq!(LkjPrior { eta: 1.0 }.ln_pdf_cov(&k).unwrap(), 0.0);
    let diag = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![3.0, 0.5, 2.0]));
    assert!(LkjPrior { eta: 2.0 }.ln_pdf_cov(&diag).unwrap().abs() < 1e-15);
    let corr = DMatrix::from_row_slice(2, 2, &[1.0, 0.6, 0.6, 1.0]);
    assert!((LkjPrior { eta: 3.0 }.ln_pdf_cov(&corr).unwrap() - 2.0 * 0.64f64.ln()).abs() < 1e-14);
}

#[test]
fn flat_prior_is_constant() {
    let mut r = rng(3);
    let (c1, c2) = (random_spd(&mut r, 3, 0.1), random_spd(&mut r, 3, 0.1));
    let a = PriorInput {
        noise: 0.2,
        lengthscales: &[0.3, 2.0],
        outputscales: &[1.5],
        task_covariance: Some(&c1),
    };
    let b = PriorInput {
        noise: 7.0,
        lengthscales: &[0.01, 9.0],
        outputscales: &[0.2],
        task_covariance: Some(&c2),
    };
    let flat = PriorSet::flat();
    assert_eq!(log_prior(&a, &flat).unwrap(), log_prior(&b, &flat).unwrap());
}

/// `C` and `C Q` for orthogonal `Q` give the same task covariance and
/// therefore the same posterior.
#[test]
fn equal_task_covariances_give_equal_posteriors() {
    let mut r = rng(4);
    let (n, t) = (7, 3);
    let x = uniform_matrix(&mut r, n, 2);
    let y = normals(&mut r, n * t);
    let c = random_lower(&mut r, t);
    let q = DMatrix::from_fn(t, t, |_, _| normal(&mut r)).qr().q();
    let build = |factor: DMatrix<f64>| {
        KronGp::new(GpParts {
            x: x.clone(),
            y: y.clone(),
            kernel: MaternKernel::new(vec![0.4, 0.6], 1.0).unwrap(),
            task_factors: vec![sym(&factor * factor.transpose())],
            noise: 0.05,
            mean: 0.1,
            input_scaling: InputScaling::identity(2),
            output_scaling: OutputScaling::identity(t),
        })
        .unwrap()
    };
    let a = build(c.clone());
    let b = build(&c * q);
    let xt = uniform_matrix(&mut r, 4, 2);
    let (pa, pb) = (a.posterior(&xt).unwrap(), b.posterior(&xt).unwrap());
    assert!(max_abs(&pa.mean, &pb.mean) < 1e-10);
    assert!((pa.cov - pb.cov).amax() < 1e-10);
    assert!((a.mll().unwrap() - b.mll().unwrap()).abs() < 1e-10);
}

#[test]
fn task_cov_is_c_ct() {
    let c = random_lower(&mut rng(5), 4);
    let f = TaskCovFactor::new(c.clone()).unwrap();
    assert_eq!(task_cov(&f).as_matrix(), &(&c * c.transpose()));
    let back = TaskCovFactor::from_params(4, &f.to_params()).unwrap();
    assert!((back.matrix() - &c).amax() < 1e-14);
    assert_eq!(task_cov(&TaskCovFactor::identity(3)).as_matrix(), &DMatrix::identity(3, 3));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn gradient_matches_finite_differences(
        seed in 0u64..10_000,
        d in 1usize..4,
        ls in proptest::collection::vec(0.1f64..10.0, 3),
        os in 0.1f64..10.0,
    ) {
        let mut r = rng(seed);
        let x = DMatrix::from_fn(6, d, |_, _| 3.0 * r.random::<f64>());
        let ls = ls[..d].to_vec();
        let k = MaternKernel::new(ls.clone(), os).unwrap();
        let g = matern25_grad(&x, &k).unwrap();
        let scale = os;
        for dim in 0..d {
            let f = |v: f64| {
                let mut l = ls.clone();
                l[dim] = v;
                matern(&x, &x, &l, os)
            };
            let h = 1e-5 * ls[dim];
            let fd = (f(ls[dim] + h) - f(ls[dim] - h)) / (2.0 * h);
            let err = (&g.lengthscales[dim] - &fd).amax();
            prop_assert!(err <= 1e-5 * fd.amax().max(scale / ls[dim]), "lengthscale {dim}: {err:e}");
        }
        let h = 1e-5 * os;
        let fd = (matern(&x, &x, &ls, os + h) - matern(&x, &x, &ls, os - h)) / (2.0 * h);
        prop_assert!((&g.outputscale - &fd).amax() <= 1e-5 * fd.amax().max(1.0));
    }

    #[test]
    fn permutation_equivariance_is_exact(seed in 0u64..10_000, n in 2usize..10, d in 1usize..4) {
        let mut r = rng(seed);
        let x = uniform_matrix(&mut r, n, d);
        let mut perm: Vec<usize> = (0..n).collect();
        for i in (1..n).rev() {
            perm.swap(i, r.random_range(0..=i));
        }
        let px = DMatrix::from_fn(n, d, |i, j| x[(perm[i], j)]);
        let k = MaternKernel::new((0..d).map(|_| 0.2 + r.random::<f64>()).collect(), 1.3).unwrap();
        let kx = matern25_sym(&x, &k).unwrap();
        let kp = matern25_sym(&px, &k).unwrap();
        for i in 0..n {
            for j in 0..n {
                prop_assert_eq!(kp.as_matrix()[(i, j)], kx.as_matrix()[(perm[i], perm[j])]);
            }
        }
    }

    #[test]
    fn kernel_matrix_is_psd(seed in 0u64..10_000, n in 1usize..12) {
        let mut r = rng(seed);
        let x = uniform_matrix(&mut r, n, 2);
        let k = MaternKernel::new(vec![0.1 + r.random::<f64>(), 0.1 + r.random::<f64>()], 1.0).unwrap();
        let kx = matern25_sym(&x, &k).unwrap();
        let e = kronmtgp::linalg::sym_eig(&kx).unwrap();
        prop_assert!(e.values.min() > -1e-10);
        prop_assert!(kx.as_matrix().iter().all(|v| *v <= 1.0 + 1e-15));
    }

    #[test]
    fn gamma_derivative_matches_differences(a in 0.5f64..5.0, b in 0.05f64..5.0, x in 0.1f64..10.0) {
        let p = GammaPrior::new(a, b).unwrap();
        let fd = central_diff(|v| p.ln_pdf(v).unwrap(), x, 1e-5);
        prop_assert!(grad_close(p.d_ln_pdf(x), fd, 1e-6));
    }
}
