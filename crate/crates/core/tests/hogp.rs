mod common;

use common::*;
use kronmtgp::gp::{GpParts, InputScaling, KronGp, KronModel, OutputScaling};
use kronmtgp::hogp::{
    hogp_fit, init_latents, latent_grid, HogpConfig, HogpHyper, HogpModel, LatentInit, LatentMode, TensorData,
};
use kronmtgp::kernels::MaternKernel;
use kronmtgp::linalg::{kron_mvm, psd_root, JitterPolicy};
use kronmtgp::sampler::{matheron_sample, matheron_sample_with, BaseDraws};
use kronmtgp::stats::{median, moment_check};
use nalgebra::DMatrix;
use proptest::prelude::*;

fn rebuild(model: &HogpModel, hyper: HogpHyper) -> HogpModel {
    let d = model.data().x().ncols();
    let t = model.data().outputs();
    HogpModel::from_parts(model.data().clone(), hyper, LatentMode::Random, InputScaling::identity(d), OutputScaling::identity(t))
        .unwrap()
}

fn mll_with(model: &HogpModel, edit: impl Fn(&mut HogpHyper)) -> f64 {
    let mut h = model.hyper().clone();
    edit(&mut h);
    rebuild(model, h).mll().unwrap()
}

#[test]
fn mll_matches_dense_oracle() {
    for seed in 0..6 {
        let m = random_hogp(seed, 5, 2, &[3, 2], 0.05);
        let x = m.data().x().clone();
        let k = kron_all(&hogp_factors(&m, &x, &x));
        let h = m.hyper();
        let want = dense_mll(&k, m.data().y(), h.noise, h.mean);
        assert!((m.mll().unwrap() - want).abs() <= 1e-8 * want.abs().max(1.0));
    }
}

#[test]
fn degenerate_axis_reduces_to_a_single_output_gp() {
    let m = random_hogp(1, 9, 2, &[1], 0.07);
    let h = m.hyper().clone();
    let x = m.data().x().clone();
    let want = dense_mll(&matern(&x, &x, &h.lengthscales, h.outputscale), m.data().y(), h.noise, h.mean);
    assert!((m.mll().unwrap() - want).abs() < 1e-10);
    let single = KronGp::new(GpParts {
        x: x.clone(),
        y: m.data().y().to_vec(),
        kernel: MaternKernel::new(h.lengthscales.clone(), h.outputscale).unwrap(),
        task_factors: vec![sym(DMatrix::identity(1, 1))],
        noise: h.noise,
        mean: h.mean,
        input_scaling: InputScaling::identity(2),
        output_scaling: OutputScaling::identity(1),
    })
    .unwrap();
    assert!((single.mll().unwrap() - m.mll().unwrap()).abs() < 1e-10);
    let xt = uniform_matrix(&mut rng(2), 3, 2);
    let base = BaseDraws::generate(3, 32, 12, 9);
    let a = matheron_sample_with(&m, &xt, &base).unwrap();
    let b = matheron_sample_with(&single, &xt, &base).unwrap();
    assert_eq!(a.values, b.values);
}

#[test]
fn mll_gradient_matches_differences_on_twenty_models() {
    for seed in 0..20u64 {
        let dims: &[usize] = if seed % 2 == 0 { &[3, 2] } else { &[4] };
        let m = random_hogp(500 + seed, 5 + seed as usize % 3, 1 + seed as usize % 2, dims, 0.05 + 0.01 * seed as f64);
        let g = m.mll_grad().unwrap();
        let h = m.hyper().clone();
        let check = |name: &str, analytic: f64, x: f64, f: &dyn Fn(f64) -> f64| {
            let fd = central_diff(f, x, 1e-5);
            assert!(grad_close(analytic, fd, 1e-4), "seed {seed} {name}: {analytic} vs {fd}");
        };
        for d in 0..h.lengthscales.len() {
            check("lengthscale", g.lengthscales[d], h.lengthscales[d], &|v| mll_with(&m, |p| p.lengthscales[d] = v));
        }
        check("outputscale", g.outputscale, h.outputscale, &|v| mll_with(&m, |p| p.outputscale = v));
        check("noise", g.noise, h.noise, &|v| mll_with(&m, |p| p.noise = v));
        check("mean", g.mean, h.mean, &|v| mll_with(&m, |p| p.mean = v));
        for l in 0..dims.len() {
            check("latent lengthscale", g.latent_lengthscales[l], h.latent_lengthscales[l], &|v| {
                mll_with(&m, |p| p.latent_lengthscales[l] = v)
            });
            for c in 0..dims[l] {
                check("latent", g.latents[l][c], h.latents[l][c], &|v| mll_with(&m, |p| p.latents[l][c] = v));
            }
        }
    }
}

#[test]
fn matheron_moments_match_the_dense_posterior() {
    let m = random_hogp(30, 6, 2, &[3, 4], 0.05);
    let xt = uniform_matrix(&mut rng(31), 2, 2);
    let post = m.posterior(&xt).unwrap();
    let batch = matheron_sample(&m, &xt, 50_000, 32).unwrap();
    assert_eq!(batch.shape, vec![50_000, 2, 3, 4]);
    let report = moment_check(&batch.values, &post.mean, &post.cov).unwrap();
    assert!(report.passes(), "{report:?}");
    let again = matheron_sample(&m, &xt, 8, 33).unwrap();
    assert_eq!(again.values, matheron_sample(&m, &xt, 8, 33).unwrap().values);
}

#[test]
fn posterior_matches_dense_oracle() {
    let m = random_hogp(34, 6, 2, &[2, 3], 0.04);
    let x = m.data().x().clone();
    let xt = uniform_matrix(&mut rng(35), 3, 2);
    let h = m.hyper();
    let train = kron_all(&hogp_factors(&m, &x, &x));
    let cross = kron_all(&hogp_factors(&m, &x, &xt));
    let test = kron_all(&hogp_factors(&m, &xt, &xt));
    let (mu, cov) = dense_posterior(&train, &cross, &test, m.data().y(), h.noise, h.mean);
    let post = m.posterior(&xt).unwrap();
    assert!(max_abs(&post.mean, &mu) < 1e-7);
    assert!((post.cov - &cov).amax() < 1e-7);
    let diag = m.posterior_variance_diag(&xt).unwrap();
    assert!(max_abs(&diag, cov.diagonal().as_slice()) < 1e-7);
}

#[test]
fn variance_vanishes_at_training_points_without_noise() {
    let m = random_hogp(36, 6, 2, &[3, 3], 1e-12);
    let x = m.data().x().rows(0, 2).into_owned();
    let v = m.posterior_variance_diag(&x).unwrap();
    assert!(v.iter().all(|s| s.abs() < 1e-8), "{v:?}");
}

/// Noiselessly, a single test point has variance `a · diag(K_L)`.
#[test]
fn single_point_variance_is_a_scaled_output_diagonal() {
    let m = random_hogp(37, 7, 2, &[3, 2], 1e-12);
    let x = m.data().x().clone();
    let xt = uniform_matrix(&mut rng(38), 1, 2);
    let f = hogp_factors(&m, &x, &xt);
    let kxx = &hogp_factors(&m, &x, &x)[0];
    let kss = &hogp_factors(&m, &xt, &xt)[0];
    let kx = &f[0];
    let a = kss[(0, 0)] - (kx.transpose() * kxx.clone().cholesky().unwrap().solve(kx))[(0, 0)];
    let kl = kron_all(&f[1..]);
    let want: Vec<f64> = kl.diagonal().iter().map(|d| a * d).collect();
    let got = m.posterior_variance_diag(&xt).unwrap();
    assert!(max_abs(&got, &want) < 1e-6, "{got:?} vs {want:?}");
}

#[test]
fn permuting_an_axis_with_its_latents_leaves_the_mll_unchanged() {
    let m = random_hogp(39, 5, 2, &[3, 4], 0.1);
    let perm = [2usize, 0, 3, 1];
    let y = m.data().y();
    let n = m.data().n();
    let mut py = vec![0.0; y.len()];
    for i in 0..n {
        for a in 0..3 {
            for b in 0..4 {
                py[i * 12 + a * 4 + b] = y[i * 12 + a * 4 + perm[b]];
            }
        }
    }
    let mut h = m.hyper().clone();
    h.latents[1] = perm.iter().map(|&b| m.hyper().latents[1][b]).collect();
    let data = TensorData::new(m.data().x().clone(), py, vec![3, 4]).unwrap();
    let p = HogpModel::from_parts(data, h, LatentMode::Random, InputScaling::identity(2), OutputScaling::identity(12)).unwrap();
    let (a, b) = (m.mll().unwrap(), p.mll().unwrap());
    assert!((a - b).abs() <= 1e-12 * a.abs(), "{a} vs {b}");
}

#[test]
fn smooth_latent_init_is_reproducible_and_smooth() {
    let a = init_latents(&[16, 5], &LatentInit::gp_smooth(7)).unwrap();
    assert_eq!(a, init_latents(&[16, 5], &LatentInit::gp_smooth(7)).unwrap());
    assert_ne!(a, init_latents(&[16, 5], &LatentInit::gp_smooth(8)).unwrap());
    let r = init_latents(&[16], &LatentInit::random(7)).unwrap();
    let jumps = |v: &[f64]| v.windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>();
    assert!(jumps(&a[0]) < jumps(&r[0]));
    assert_eq!(latent_grid(5), vec![0.0, 0.25, 0.5, 0.75, 1.0]);
}

#[test]
fn smooth_latents_give_smoother_variance_in_most_seeds() {
    let wins = (0..10).filter(|&seed| {
        let (random, smooth) = smoothness_trial(seed, 16, 10);
        smooth < random
    });
    assert!(wins.count() >= 8);
}

/// Tensor responses drawn from a HOGP prior through Kronecker roots.
fn simulate(seed: u64, n: usize, m: usize, dims: &[usize]) -> (TensorData, DMatrix<f64>, Vec<f64>) {
    let mut r = rng(seed);
    let x = uniform_matrix(&mut r, n + m, 2);
    let p = JitterPolicy::default();
    let mut roots = vec![psd_root(&sym(matern(&x, &x, &[0.35, 0.35], 1.0) + DMatrix::identity(n + m, n + m) * 1e-8), &p)
        .unwrap()
        .matrix()
        .clone()];
    for (k, &d) in dims.iter().enumerate() {
        let g = DMatrix::from_column_slice(d, 1, &latent_grid(d));
        let ls = 0.3 + 0.2 * k as f64;
        let kl = matern(&g, &g, &[ls], 1.0) + DMatrix::identity(d, d) * 1e-8;
        roots.push(psd_root(&sym(kl), &p).unwrap().matrix().clone());
    }
    let t: usize = dims.iter().product();
    let f = kron_mvm(&roots, &normals(&mut r, (n + m) * t)).unwrap();
    let y: Vec<f64> = f[..n * t].iter().map(|v| v + 0.05 * normal(&mut r)).collect();
    let data = TensorData::new(x.rows(0, n).into_owned(), y, dims.to_vec()).unwrap();
    (data, x.rows(n, m).into_owned(), f[n * t..].to_vec())
}

#[test]
fn fitted_model_beats_the_mean_predictor() {
    let mut ratios = Vec::new();
    for seed in 0..10 {
        let (data, xt, truth) = simulate(600 + seed, 32, 16, &[8, 8]);
        let t = data.outputs();
        let col_mean: Vec<f64> = (0..t).map(|j| (0..32).map(|i| data.y()[i * t + j]).sum::<f64>() / 32.0).collect();
        let model = hogp_fit(data, &LatentInit::gp_smooth(seed), &HogpConfig::default()).unwrap();
        let pred = model.posterior(&xt).unwrap().mean;
        let rmse = |p: &dyn Fn(usize) -> f64| {
            (truth.iter().enumerate().map(|(k, v)| (v - p(k)).powi(2)).sum::<f64>() / truth.len() as f64).sqrt()
        };
        ratios.push(rmse(&|k| pred[k]) / rmse(&|k| col_mean[k % t]));
    }
    let med = median(&ratios);
    assert!(med < 1.0, "median RMSE ratio {med} from {ratios:?}");
}

#[test]
fn fit_is_deterministic_and_respects_zero_steps() {
    let (data, _, _) = simulate(40, 8, 1, &[3, 2]);
    let mut cfg = HogpConfig::default();
    cfg.adam.steps = 30;
    let a = hogp_fit(data.clone(), &LatentInit::random(1), &cfg).unwrap();
    let b = hogp_fit(data.clone(), &LatentInit::random(1), &cfg).unwrap();
    assert_eq!(a.hyper(), b.hyper());
    assert_eq!(a.losses(), b.losses());
    cfg.adam.steps = 0;
    let z = hogp_fit(data.clone(), &LatentInit::gp_smooth(2), &cfg).unwrap();
    let u = HogpModel::untrained(data, &LatentInit::gp_smooth(2), &cfg).unwrap();
    assert_eq!(z.hyper(), u.hyper());
    assert_eq!(z.gp().mll().unwrap(), u.mll().unwrap());
}

#[test]
fn json_round_trip_keeps_latents() {
    let m = random_hogp(41, 5, 2, &[2, 3], 0.1);
    let back = HogpModel::from_json(&m.to_json().unwrap()).unwrap();
    assert_eq!(back.hyper(), m.hyper());
    assert_eq!(back.mll().unwrap(), m.mll().unwrap());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn variance_diagonal_matches_dense(seed in 0u64..10_000, a in 1usize..4, b in 1usize..4, m in 1usize..4) {
        let model = random_hogp(seed, 5, 2, &[a, b], 0.05);
        let xt = uniform_matrix(&mut rng(seed + 1), m, 2);
        let dense = model.posterior(&xt).unwrap().cov;
        let diag = model.posterior_variance_diag(&xt).unwrap();
        prop_assert!(max_abs(&diag, dense.diagonal().as_slice()) < 1e-7);
        prop_assert!(diag.iter().all(|v| *v >= -1e-10));
    }

    #[test]
    fn latent_kernels_are_psd(seed in 0u64..10_000, d in 1usize..12) {
        let v = init_latents(&[d], &LatentInit::random(seed)).unwrap();
        let g = DMatrix::from_column_slice(d, 1, &v[0]);
        let k = matern(&g, &g, &[0.7], 1.0);
        let e = kronmtgp::linalg::sym_eig(&sym(k)).unwrap();
        prop_assert!(e.values.min() > -1e-10);
    }
}
