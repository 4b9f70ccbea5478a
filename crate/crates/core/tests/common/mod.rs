//! Dense reference implementations shared by the integration tests. They
//! are written from the textbook formulas and never call the structured
//! code paths they check.
#![allow(dead_code)]

use kronmtgp::gp::{InputScaling, OutputScaling};
use kronmtgp::hogp::{HogpHyper, HogpModel, LatentMode, TensorData};
use kronmtgp::kernels::TaskCovFactor;
use kronmtgp::linalg::SymMatrix;
use kronmtgp::mtgp::{MtgpHyper, MtgpModel, TrainingData};
use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

pub fn normals(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
    (0..n).map(|_| normal(rng)).collect()
}

pub fn uniform_matrix(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
    DMatrix::from_fn(r, c, |_, _| rng.random::<f64>())
}

/// `A Aᵀ / n + δ I` for a Gaussian `A`.
pub fn random_spd(rng: &mut ChaCha8Rng, n: usize, delta: f64) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| normal(rng));
    &a * a.transpose() / n as f64 + DMatrix::identity(n, n) * delta
}

pub fn random_lower(rng: &mut ChaCha8Rng, t: usize) -> DMatrix<f64> {
    DMatrix::from_fn(t, t, |i, j| {
        if i > j {
            0.5 * normal(rng)
        } else if i == j {
            0.5 + rng.random::<f64>()
        } else {
            0.0
        }
    })
}

/// Matérn-5/2 with ARD lengthscales, from the scalar definition.
pub fn matern(x: &DMatrix<f64>, z: &DMatrix<f64>, ls: &[f64], os: f64) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), z.nrows(), |i, j| {
        let r2: f64 = (0..x.ncols()).map(|d| ((x[(i, d)] - z[(j, d)]) / ls[d]).powi(2)).sum();
        let r = r2.sqrt();
        let s = 5f64.sqrt() * r;
        os * (1.0 + s + 5.0 * r2 / 3.0) * (-s).exp()
    })
}

pub fn kron_all(factors: &[DMatrix<f64>]) -> DMatrix<f64> {
    let mut out = DMatrix::from_element(1, 1, 1.0);
    for f in factors {
        out = out.kronecker(f);
    }
    out
}

/// Gaussian log-density of `y` under `N(mean·1, K + σ²I)` by Cholesky.
pub fn dense_mll(k: &DMatrix<f64>, y: &[f64], noise: f64, mean: f64) -> f64 {
    let n = y.len();
    let a = k + DMatrix::identity(n, n) * noise;
    let chol = a.cholesky().expect("dense oracle matrix is SPD");
    let r = DVector::from_iterator(n, y.iter().map(|v| v - mean));
    let alpha = chol.solve(&r);
    let logdet: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    -0.5 * r.dot(&alpha) - 0.5 * logdet - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln()
}

/// Exact predictive mean and covariance of a GP over the product space.
pub fn dense_posterior(
    k_train: &DMatrix<f64>,
    k_cross: &DMatrix<f64>,
    k_test: &DMatrix<f64>,
    y: &[f64],
    noise: f64,
    mean: f64,
) -> (Vec<f64>, DMatrix<f64>) {
    let n = y.len();
    let a = k_train + DMatrix::identity(n, n) * noise;
    let chol = a.cholesky().expect("dense oracle matrix is SPD");
    let r = DVector::from_iterator(n, y.iter().map(|v| v - mean));
    let mu = k_cross.transpose() * chol.solve(&r);
    let v = chol.solve(k_cross);
    let cov = k_test - k_cross.transpose() * v;
    (mu.iter().map(|m| m + mean).collect(), cov)
}

pub fn max_abs(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let scale = b.iter().map(|v| v.abs()).fold(0.0, f64::max).max(1.0);
    max_abs(a, b) / scale
}

/// Central differences of `f` with step `h·|x|` (absolute `h` at zero).
pub fn central_diff(f: impl Fn(f64) -> f64, x: f64, h: f64) -> f64 {
    let step = if x == 0.0 { h } else { h * x.abs() };
    (f(x + step) - f(x - step)) / (2.0 * step)
}

/// True when `a` and `b` agree within `tol` relative, with an absolute
/// floor at `tol` for near-zero derivatives.
pub fn grad_close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * a.abs().max(b.abs()).max(1.0)
}

pub struct MtgpCase {
    pub model: MtgpModel,
    pub lengthscales: Vec<f64>,
    pub c: DMatrix<f64>,
    pub noise: f64,
    pub mean: f64,
}

impl MtgpCase {
    pub fn k_xx(&self) -> DMatrix<f64> {
        let x = self.model.data().x();
        matern(x, x, &self.lengthscales, 1.0)
    }

    pub fn k_t(&self) -> DMatrix<f64> {
        &self.c * self.c.transpose()
    }

    pub fn y(&self) -> Vec<f64> {
        self.model.data().y_vec()
    }
}

/// MTGP with random hyperparameters on unit-cube inputs, with identity
/// scalings so internal and raw coordinates coincide.
pub fn random_mtgp(seed: u64, n: usize, d: usize, t: usize, noise: f64) -> MtgpCase {
    let mut r = rng(seed);
    let x = uniform_matrix(&mut r, n, d);
    let y = DMatrix::from_fn(n, t, |_, _| normal(&mut r));
    let lengthscales: Vec<f64> = (0..d).map(|_| 0.2 + 0.6 * r.random::<f64>()).collect();
    let c = random_lower(&mut r, t);
    let mean = 0.3 * normal(&mut r);
    mtgp_from(x, y, lengthscales, c, noise, mean)
}

pub fn mtgp_from(x: DMatrix<f64>, y: DMatrix<f64>, lengthscales: Vec<f64>, c: DMatrix<f64>, noise: f64, mean: f64) -> MtgpCase {
    let (d, t) = (x.ncols(), y.ncols());
    let data = TrainingData::new(x, y).unwrap();
    let hyper = MtgpHyper {
        lengthscales: lengthscales.clone(),
        task_factor: TaskCovFactor::new(c.clone()).unwrap(),
        noise,
        mean,
    };
    let model = MtgpModel::from_parts(data, hyper, InputScaling::identity(d), OutputScaling::identity(t)).unwrap();
    MtgpCase {
        model,
        lengthscales,
        c,
        noise,
        mean,
    }
}

/// HOGP with random latents and hyperparameters, identity scalings.
pub fn random_hogp(seed: u64, n: usize, d: usize, dims: &[usize], noise: f64) -> HogpModel {
    let mut r = rng(seed);
    let x = uniform_matrix(&mut r, n, d);
    let total: usize = dims.iter().product();
    let y = normals(&mut r, n * total);
    let hyper = HogpHyper {
        lengthscales: (0..d).map(|_| 0.2 + 0.6 * r.random::<f64>()).collect(),
        outputscale: 0.5 + r.random::<f64>(),
        latents: dims.iter().map(|&k| normals(&mut r, k)).collect(),
        latent_lengthscales: dims.iter().map(|_| 0.5 + r.random::<f64>()).collect(),
        noise,
        mean: 0.2 * normal(&mut r),
    };
    let data = TensorData::new(x, y, dims.to_vec()).unwrap();
    HogpModel::from_parts(data, hyper, LatentMode::Random, InputScaling::identity(d), OutputScaling::identity(total)).unwrap()
}

/// Dense prior covariance factors `[K_XX, K_1, …]` of a HOGP.
pub fn hogp_factors(model: &HogpModel, x: &DMatrix<f64>, z: &DMatrix<f64>) -> Vec<DMatrix<f64>> {
    let h = model.hyper();
    let mut out = vec![matern(x, z, &h.lengthscales, h.outputscale)];
    for (v, &l) in h.latents.iter().zip(&h.latent_lengthscales) {
        let m = DMatrix::from_column_slice(v.len(), 1, v);
        out.push(matern(&m, &m, &[l], 1.0));
    }
    out
}

pub fn sym(m: DMatrix<f64>) -> SymMatrix {
    SymMatrix::new(m).unwrap()
}

/// Sum of absolute differences between neighbours along both axes of a
/// row-major `rows × cols` grid.
pub fn total_variation(v: &[f64], rows: usize, cols: usize) -> f64 {
    let mut acc = 0.0;
    for i in 0..rows {
        for j in 0..cols {
            let here = v[i * cols + j];
            if i + 1 < rows {
                acc += (v[(i + 1) * cols + j] - here).abs();
            }
            if j + 1 < cols {
                acc += (v[i * cols + j + 1] - here).abs();
            }
        }
    }
    acc
}

/// Total variation of the untrained posterior variance over a `d × d`
/// output grid of the smoothness test function, for random and smooth
/// latent initializations with the same seed.
pub fn smoothness_trial(seed: u64, n: usize, d: usize) -> (f64, f64) {
    use kronmtgp::design::latin_hypercube;
    use kronmtgp::hogp::{smooth_test_function, HogpConfig, LatentInit};
    let x = latin_hypercube(n, 2, seed);
    let data = smooth_test_function(&x, d, 0.01, seed).unwrap();
    let xt = latin_hypercube(1, 2, seed ^ 0xabc);
    let tv = |init: LatentInit| {
        let m = HogpModel::untrained(data.clone(), &init, &HogpConfig::default()).unwrap();
        total_variation(&m.posterior_variance_diag(&xt).unwrap(), d, d)
    };
    (tv(LatentInit::random(seed)), tv(LatentInit::gp_smooth(seed)))
}
