//! Matérn-5/2 ARD kernels, the Cholesky-parameterized task covariance, and
//! hyperparameter priors.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use statrs::function::gamma::ln_gamma;

use crate::error::{domain_err, shape_err, Result};
use crate::linalg::SymMatrix;

const SQRT5: f64 = 2.236_067_977_499_79;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MaternKernel {
    lengthscales: Vec<f64>,
    outputscale: f64,
}

impl MaternKernel {
    pub fn new(lengthscales: Vec<f64>, outputscale: f64) -> Result<Self> {
        if lengthscales.is_empty() {
            return Err(domain_err("kernel needs at least one lengthscale"));
        }
        if lengthscales.iter().any(|&l| !(l > 0.0 && l.is_finite())) {
            return Err(domain_err(format!("lengthscales must be positive, got {lengthscales:?}")));
        }
        if !(outputscale > 0.0 && outputscale.is_finite()) {
            return Err(domain_err(format!("outputscale must be positive, got {outputscale}")));
        }
        Ok(MaternKernel {
            lengthscales,
            outputscale,
        })
    }

    pub fn isotropic(dim: usize, lengthscale: f64, outputscale: f64) -> Result<Self> {
        Self::new(vec![lengthscale; dim], outputscale)
    }

    pub fn lengthscales(&self) -> &[f64] {
        &self.lengthscales
    }

    pub fn outputscale(&self) -> f64 {
        self.outputscale
    }

    pub fn dim(&self) -> usize {
        self.lengthscales.len()
    }

    fn check(&self, x: &DMatrix<f64>) -> Result<()> {
        if x.ncols() != self.dim() {
            return Err(shape_err(format!(
                "inputs have {} columns, kernel has {} lengthscales",
                x.ncols(),
                self.dim()
            )));
        }
        Ok(())
    }

    fn scaled_distance(&self, x: &DMatrix<f64>, i: usize, z: &DMatrix<f64>, j: usize) -> f64 {
        let mut acc = 0.0;
        for (d, l) in self.lengthscales.iter().enumerate() {
            let u = (x[(i, d)] - z[(j, d)]) / l;
            acc += u * u;
        }
        acc.sqrt()
    }
}

/// `(1 + √5 r + 5r²/3) exp(−√5 r)` for a scaled distance `r`.
pub fn matern52_profile(r: f64) -> f64 {
    let a = SQRT5 * r;
    (1.0 + a + a * a / 3.0) * (-a).exp()
}

pub fn matern25(x: &DMatrix<f64>, z: &DMatrix<f64>, k: &MaternKernel) -> Result<DMatrix<f64>> {
    k.check(x)?;
    k.check(z)?;
    Ok(DMatrix::from_fn(x.nrows(), z.nrows(), |i, j| {
        k.outputscale * matern52_profile(k.scaled_distance(x, i, z, j))
    }))
}

/// `K(X, X)`, symmetric by construction.
pub fn matern25_sym(x: &DMatrix<f64>, k: &MaternKernel) -> Result<SymMatrix> {
    k.check(x)?;
    let n = x.nrows();
    let mut m = DMatrix::zeros(n, n);
    for i in 0..n {
        m[(i, i)] = k.outputscale;
        for j in 0..i {
            let v = k.outputscale * matern52_profile(k.scaled_distance(x, i, x, j));
            m[(i, j)] = v;
            m[(j, i)] = v;
        }
    }
    SymMatrix::new(m)
}

/// Derivatives of `K(X, X)` with respect to each lengthscale and the
/// outputscale (constrained space).
#[derive(Debug, Clone)]
pub struct MaternGrad {
    pub lengthscales: Vec<DMatrix<f64>>,
    pub outputscale: DMatrix<f64>,
}

pub fn matern25_grad(x: &DMatrix<f64>, k: &MaternKernel) -> Result<MaternGrad> {
    k.check(x)?;
    let n = x.nrows();
    let dim = k.dim();
    let mut ls = vec![DMatrix::zeros(n, n); dim];
    let mut os = DMatrix::zeros(n, n);
    for i in 0..n {
        os[(i, i)] = 1.0;
        for j in 0..i {
            let r = k.scaled_distance(x, i, x, j);
            let a = SQRT5 * r;
            let e = (-a).exp();
            let base = k.outputscale * (5.0 / 3.0) * (1.0 + a) * e;
            for (d, l) in k.lengthscales.iter().enumerate() {
                let delta = x[(i, d)] - x[(j, d)];
                let g = base * delta * delta / (l * l * l);
                ls[d][(i, j)] = g;
                ls[d][(j, i)] = g;
            }
            let p = (1.0 + a + a * a / 3.0) * e;
            os[(i, j)] = p;
            os[(j, i)] = p;
        }
    }
    Ok(MaternGrad {
        lengthscales: ls,
        outputscale: os,
    })
}

/// For one-dimensional inputs `v`, `D[a, b] = ∂k(v_a, v_b)/∂v_a`.
pub fn matern25_input_grad_1d(v: &[f64], lengthscale: f64, outputscale: f64) -> DMatrix<f64> {
    let n = v.len();
    DMatrix::from_fn(n, n, |a, b| {
        if a == b {
            return 0.0;
        }
        let delta = v[a] - v[b];
        let r = delta.abs() / lengthscale;
        let s = SQRT5 * r;
        -outputscale * (5.0 / 3.0) * (1.0 + s) * (-s).exp() * delta / (lengthscale * lengthscale)
    })
}

/// Lower-triangular factor `C` with positive diagonal; the task covariance
/// is `C Cᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskCovFactor {
    c: DMatrix<f64>,
}

impl TaskCovFactor {
    pub fn new(c: DMatrix<f64>) -> Result<Self> {
        let t = c.nrows();
        if c.ncols() != t || t == 0 {
            return Err(shape_err(format!("task factor must be square and nonempty, got {}x{}", t, c.ncols())));
        }
        for i in 0..t {
            if !(c[(i, i)] > 0.0 && c[(i, i)].is_finite()) {
                return Err(domain_err(format!("task factor diagonal must be positive, C[{i},{i}] = {}", c[(i, i)])));
            }
            for j in (i + 1)..t {
                if c[(i, j)] != 0.0 {
                    return Err(domain_err("task factor must be lower triangular"));
                }
            }
        }
        if c.iter().any(|v| !v.is_finite()) {
            return Err(domain_err("task factor has non-finite entries"));
        }
        Ok(TaskCovFactor { c })
    }

    pub fn identity(t: usize) -> Self {
        TaskCovFactor {
            c: DMatrix::identity(t, t),
        }
    }

    pub fn tasks(&self) -> usize {
        self.c.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.c
    }

    /// Unconstrained coordinates: row-major lower triangle with the diagonal
    /// stored as `ln C_ii`.
    pub fn to_params(&self) -> Vec<f64> {
        let t = self.tasks();
        let mut out = Vec::with_capacity(t * (t + 1) / 2);
        for i in 0..t {
            for j in 0..=i {
                out.push(if i == j { self.c[(i, i)].ln() } else { self.c[(i, j)] });
            }
        }
        out
    }

    pub fn from_params(t: usize, params: &[f64]) -> Result<Self> {
        if params.len() != t * (t + 1) / 2 {
            return Err(shape_err(format!("expected {} task parameters, got {}", t * (t + 1) / 2, params.len())));
        }
        let mut c = DMatrix::zeros(t, t);
        let mut k = 0;
        for i in 0..t {
            for j in 0..=i {
                c[(i, j)] = if i == j { params[k].exp() } else { params[k] };
                k += 1;
            }
        }
        Self::new(c)
    }
}

pub fn task_cov(factor: &TaskCovFactor) -> SymMatrix {
    let c = factor.matrix();
    SymMatrix::new(c * c.transpose()).expect("C Cᵀ is symmetric and finite")
}

/// Gamma(concentration, rate).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GammaPrior {
    pub concentration: f64,
    pub rate: f64,
}

impl GammaPrior {
    pub fn new(concentration: f64, rate: f64) -> Result<Self> {
        if !(concentration > 0.0 && rate > 0.0) {
            return Err(domain_err("Gamma prior parameters must be positive"));
        }
        Ok(GammaPrior { concentration, rate })
    }

    /// Normalized log-density.
    pub fn ln_pdf(&self, x: f64) -> Result<f64> {
        if !(x > 0.0 && x.is_finite()) {
            return Err(domain_err(format!("Gamma prior evaluated outside its support at {x}")));
        }
        let a = self.concentration;
        Ok(a * self.rate.ln() - ln_gamma(a) + (a - 1.0) * x.ln() - self.rate * x)
    }

    pub fn d_ln_pdf(&self, x: f64) -> f64 {
        (self.concentration - 1.0) / x - self.rate
    }
}

/// LKJ(η) over correlation matrices, without its normalizing constant.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LkjPrior {
    pub eta: f64,
}

impl LkjPrior {
    /// `(η − 1) log det(corr(K))` for a covariance `K`.
    pub fn ln_pdf_cov(&self, cov: &DMatrix<f64>) -> Result<f64> {
        if self.eta == 1.0 {
            return Ok(0.0);
        }
        let t = cov.nrows();
        let d: Vec<f64> = (0..t).map(|i| cov[(i, i)]).collect();
        if d.iter().any(|&v| !(v > 0.0)) {
            return Err(domain_err("covariance has a nonpositive diagonal"));
        }
        let corr = DMatrix::from_fn(t, t, |i, j| cov[(i, j)] / (d[i] * d[j]).sqrt());
        let ch = corr
            .cholesky()
            .ok_or_else(|| domain_err("correlation matrix is not positive definite"))?;
        let logdet = 2.0 * ch.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok((self.eta - 1.0) * logdet)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSet {
    pub noise: GammaPrior,
    pub lengthscale: GammaPrior,
    pub outputscale: GammaPrior,
    pub task: LkjPrior,
}

impl Default for PriorSet {
    fn default() -> Self {
        PriorSet {
            noise: GammaPrior {
                concentration: 1.1,
                rate: 0.05,
            },
            lengthscale: GammaPrior {
                concentration: 3.0,
                rate: 6.0,
            },
            outputscale: GammaPrior {
                concentration: 2.0,
                rate: 0.15,
            },
            task: LkjPrior { eta: 2.0 },
        }
    }
}

impl PriorSet {
    /// Improper flat priors: `log_prior` is constant in the hyperparameters.
    pub fn flat() -> Self {
        PriorSet {
            noise: GammaPrior {
                concentration: 1.0,
                rate: f64::MIN_POSITIVE,
            },
            lengthscale: GammaPrior {
                concentration: 1.0,
                rate: f64::MIN_POSITIVE,
            },
            outputscale: GammaPrior {
                concentration: 1.0,
                rate: f64::MIN_POSITIVE,
            },
            task: LkjPrior { eta: 1.0 },
        }
    }
}

/// Hyperparameters in constrained space, as seen by the priors.
#[derive(Debug, Clone, Copy)]
pub struct PriorInput<'a> {
    pub noise: f64,
    pub lengthscales: &'a [f64],
    pub outputscales: &'a [f64],
    pub task_covariance: Option<&'a DMatrix<f64>>,
}

/// Sum of prior log-densities. Gamma terms are normalized; the LKJ
/// normalizing constant is dropped.
pub fn log_prior(input: &PriorInput<'_>, priors: &PriorSet) -> Result<f64> {
    let mut acc = priors.noise.ln_pdf(input.noise)?;
    for &l in input.lengthscales {
        acc += priors.lengthscale.ln_pdf(l)?;
    }
    for &s in input.outputscales {
        acc += priors.outputscale.ln_pdf(s)?;
    }
    if let Some(cov) = input.task_covariance {
        acc += priors.task.ln_pdf_cov(cov)?;
    }
    Ok(acc)
}
