//! The Kronecker-structured GP shared by the multi-task and high-order
//! models: covariance `K_XX ⊗ K₂ ⊗ … ⊗ K_k + σ²I` over standardized
//! responses at normalized inputs.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::OnceLock;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{domain_err, shape_err, Error, Result};
use crate::kernels::{matern25, matern25_sym, MaternKernel};
use crate::linalg::{kron_dense, kron_mvm, mode_gram, psd_root, JitterPolicy, KroneckerOperator, RootFactor, SymMatrix};

/// Largest `m·T` for which the dense predictive covariance is formed.
pub const ORACLE_CAP: usize = 4096;

/// Affine map from raw inputs onto the unit cube.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InputScaling {
    pub lower: Vec<f64>,
    pub range: Vec<f64>,
}

impl InputScaling {
    pub fn from_bounds(lower: &[f64], upper: &[f64]) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(shape_err("bounds must be nonempty and of equal length"));
        }
        let mut range = Vec::with_capacity(lower.len());
        for (l, u) in lower.iter().zip(upper) {
            if !(l.is_finite() && u.is_finite()) || u < l {
                return Err(domain_err(format!("invalid bound pair [{l}, {u}]")));
            }
            range.push(if u > l { u - l } else { 1.0 });
        }
        Ok(InputScaling {
            lower: lower.to_vec(),
            range,
        })
    }

    /// Column-wise min/max of the data. Constant columns map to zero.
    pub fn from_data(x: &DMatrix<f64>) -> Result<Self> {
        let lower: Vec<f64> = x.column_iter().map(|c| c.min()).collect();
        let upper: Vec<f64> = x.column_iter().map(|c| c.max()).collect();
        Self::from_bounds(&lower, &upper)
    }

    pub fn identity(d: usize) -> Self {
        InputScaling {
            lower: vec![0.0; d],
            range: vec![1.0; d],
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn apply(&self, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        if x.ncols() != self.dim() {
            return Err(shape_err(format!("inputs have {} columns, model expects {}", x.ncols(), self.dim())));
        }
        if x.iter().any(|v| !v.is_finite()) {
            return Err(domain_err("inputs contain non-finite values"));
        }
        Ok(DMatrix::from_fn(x.nrows(), x.ncols(), |i, j| (x[(i, j)] - self.lower[j]) / self.range[j]))
    }

    pub fn invert(&self, z: &DMatrix<f64>) -> DMatrix<f64> {
        DMatrix::from_fn(z.nrows(), z.ncols(), |i, j| self.lower[j] + z[(i, j)] * self.range[j])
    }
}

/// Per-output affine map `raw = offset + scale·standardized`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputScaling {
    pub offset: Vec<f64>,
    pub scale: Vec<f64>,
}

impl OutputScaling {
    pub fn identity(t: usize) -> Self {
        OutputScaling {
            offset: vec![0.0; t],
            scale: vec![1.0; t],
        }
    }

    fn moments(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
        let n = values.clone().count() as f64;
        let mean = values.clone().sum::<f64>() / n;
        let var = if n > 1.0 {
            values.map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        let sd = var.sqrt();
        (mean, if sd > 1e-12 * mean.abs().max(1.0) { sd } else { 1.0 })
    }

    /// Standardizes each column of an `n × t` row-major response block.
    pub fn per_output(y: &[f64], t: usize) -> Self {
        let n = y.len() / t;
        let (offset, scale) = (0..t)
            .map(|j| Self::moments((0..n).map(move |i| y[i * t + j])))
            .unzip();
        OutputScaling { offset, scale }
    }

    /// One offset and scale for every output.
    pub fn global(y: &[f64], t: usize) -> Self {
        let (m, s) = Self::moments(y.iter().copied());
        OutputScaling {
            offset: vec![m; t],
            scale: vec![s; t],
        }
    }

    pub fn outputs(&self) -> usize {
        self.offset.len()
    }

    pub fn standardize(&self, y: &[f64]) -> Vec<f64> {
        let t = self.outputs();
        y.iter()
            .enumerate()
            .map(|(i, v)| (v - self.offset[i % t]) / self.scale[i % t])
            .collect()
    }

    /// In place, for any buffer whose innermost axis is the output axis.
    pub fn unstandardize(&self, values: &mut [f64]) {
        let t = self.outputs();
        for (i, v) in values.iter_mut().enumerate() {
            *v = self.offset[i % t] + self.scale[i % t] * *v;
        }
    }
}

/// Ingredients of a [`KronGp`], all in the model's internal coordinates.
#[derive(Debug, Clone)]
pub struct GpParts {
    /// Normalized `n × d` inputs.
    pub x: DMatrix<f64>,
    /// Standardized responses, `vec(Y)[i·T + task]`.
    pub y: Vec<f64>,
    pub kernel: MaternKernel,
    pub task_factors: Vec<SymMatrix>,
    pub noise: f64,
    pub mean: f64,
    pub input_scaling: InputScaling,
    pub output_scaling: OutputScaling,
}

/// Predictive distribution of the latent function at test inputs, in raw
/// response units, flattened point-major.
#[derive(Debug, Clone)]
pub struct PosteriorGaussian {
    pub mean: Vec<f64>,
    pub cov: DMatrix<f64>,
}

/// Marginal log-likelihood together with its sensitivities: for every
/// factor `f`, `∂L/∂θ = Σ_ab (∂K_f/∂θ)_ab · factor_sens[f]_ab`.
#[derive(Debug, Clone)]
pub struct MllTerms {
    pub mll: f64,
    pub factor_sens: Vec<DMatrix<f64>>,
    pub d_noise: f64,
    pub d_mean: f64,
}

#[derive(Debug)]
pub struct KronGp {
    x: DMatrix<f64>,
    y: Vec<f64>,
    kernel: MaternKernel,
    noise: f64,
    mean: f64,
    input_scaling: InputScaling,
    output_scaling: OutputScaling,
    policy: JitterPolicy,
    op: KroneckerOperator,
    alpha: Vec<f64>,
    data_root: OnceLock<Result<RootFactor>>,
    task_roots: OnceLock<Result<Vec<RootFactor>>>,
    root_builds: AtomicUsize,
    root_hits: AtomicUsize,
}

impl Clone for KronGp {
    fn clone(&self) -> Self {
        KronGp {
            x: self.x.clone(),
            y: self.y.clone(),
            kernel: self.kernel.clone(),
            noise: self.noise,
            mean: self.mean,
            input_scaling: self.input_scaling.clone(),
            output_scaling: self.output_scaling.clone(),
            policy: self.policy.clone(),
            op: self.op.clone(),
            alpha: self.alpha.clone(),
            data_root: OnceLock::new(),
            task_roots: OnceLock::new(),
            root_builds: AtomicUsize::new(0),
            root_hits: AtomicUsize::new(0),
        }
    }
}

impl KronGp {
    pub fn new(parts: GpParts) -> Result<Self> {
        Self::with_policy(parts, JitterPolicy::default())
    }

    pub fn with_policy(parts: GpParts, policy: JitterPolicy) -> Result<Self> {
        let GpParts {
            x,
            y,
            kernel,
            task_factors,
            noise,
            mean,
            input_scaling,
            output_scaling,
        } = parts;
        let n = x.nrows();
        if n == 0 {
            return Err(shape_err("model needs at least one training input"));
        }
        let t: usize = task_factors.iter().map(SymMatrix::order).product();
        if y.len() != n * t {
            return Err(shape_err(format!("responses have length {}, expected {n} x {t}", y.len())));
        }
        if input_scaling.dim() != x.ncols() || output_scaling.outputs() != t {
            return Err(shape_err("scaling dimensions do not match the data"));
        }
        if !(noise >= 0.0 && noise.is_finite()) || !mean.is_finite() {
            return Err(domain_err(format!("noise must be nonnegative and mean finite (noise {noise}, mean {mean})")));
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(domain_err("responses contain non-finite values"));
        }
        let kxx = matern25_sym(&x, &kernel)?;
        let mut factors = Vec::with_capacity(task_factors.len() + 1);
        factors.push(kxx);
        factors.extend(task_factors);
        let op = KroneckerOperator::new(factors, noise)?;
        let resid: Vec<f64> = y.iter().map(|v| v - mean).collect();
        let alpha = op.solve(&resid)?;
        Ok(KronGp {
            x,
            y,
            kernel,
            noise,
            mean,
            input_scaling,
            output_scaling,
            policy,
            op,
            alpha,
            data_root: OnceLock::new(),
            task_roots: OnceLock::new(),
            root_builds: AtomicUsize::new(0),
            root_hits: AtomicUsize::new(0),
        })
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn input_dim(&self) -> usize {
        self.x.ncols()
    }

    /// Total number of outputs per input.
    pub fn outputs(&self) -> usize {
        self.op.order() / self.n()
    }

    pub fn output_dims(&self) -> Vec<usize> {
        self.op.dims()[1..].to_vec()
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn kernel(&self) -> &MaternKernel {
        &self.kernel
    }

    pub fn noise(&self) -> f64 {
        self.noise
    }

    pub fn mean(&self) -> f64 {
        self.mean
    }

    pub fn k_xx(&self) -> &SymMatrix {
        &self.op.factors()[0]
    }

    pub fn task_factors(&self) -> &[SymMatrix] {
        &self.op.factors()[1..]
    }

    pub fn operator(&self) -> &KroneckerOperator {
        &self.op
    }

    /// `(K_XX ⊗ K_T + σ²I)⁻¹ (y − m)`.
    pub fn alpha(&self) -> &[f64] {
        &self.alpha
    }

    pub fn input_scaling(&self) -> &InputScaling {
        &self.input_scaling
    }

    pub fn output_scaling(&self) -> &OutputScaling {
        &self.output_scaling
    }

    pub fn jitter_policy(&self) -> &JitterPolicy {
        &self.policy
    }

    pub fn normalize(&self, x_raw: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        self.input_scaling.apply(x_raw)
    }

    /// `K(X, X_test)` for normalized test inputs.
    pub fn cross_cov(&self, xs: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        matern25(&self.x, xs, &self.kernel)
    }

    pub fn test_cov(&self, xs: &DMatrix<f64>) -> Result<SymMatrix> {
        matern25_sym(xs, &self.kernel)
    }

    /// Root of `K_XX`, factorized on first use.
    pub fn data_root(&self) -> Result<&RootFactor> {
        match self.data_root.get_or_init(|| psd_root(self.k_xx(), &self.policy)) {
            Ok(r) => Ok(r),
            Err(e) => Err(Error::Decomposition(e.to_string())),
        }
    }

    /// Roots of the task factors, computed once per model and shared by
    /// every later sampling call.
    pub fn task_roots(&self) -> Result<&[RootFactor]> {
        let mut built = false;
        let r = self.task_roots.get_or_init(|| {
            built = true;
            self.root_builds.fetch_add(1, Ordering::Relaxed);
            self.task_factors().iter().map(|k| psd_root(k, &self.policy)).collect()
        });
        if !built {
            self.root_hits.fetch_add(1, Ordering::Relaxed);
        }
        match r {
            Ok(v) => Ok(v),
            Err(e) => Err(Error::Decomposition(e.to_string())),
        }
    }

    /// `(builds, hits)` of the task-root cache.
    pub fn task_root_stats(&self) -> (usize, usize) {
        (self.root_builds.load(Ordering::Relaxed), self.root_hits.load(Ordering::Relaxed))
    }

    pub fn mll(&self) -> Result<f64> {
        let n = self.op.order() as f64;
        let logdet = self.op.logdet()?;
        let quad: f64 = self.y.iter().zip(&self.alpha).map(|(y, a)| (y - self.mean) * a).sum();
        Ok(-0.5 * (n * (2.0 * std::f64::consts::PI).ln() + logdet + quad))
    }

    pub fn mll_terms(&self) -> Result<MllTerms> {
        let mll = self.mll()?;
        let dims = self.op.dims();
        let k = dims.len();
        let alpha = &self.alpha;
        let inv = self.op.inverse_spectrum();
        let eigs = self.op.eigen();

        let mut factor_sens = Vec::with_capacity(k);
        for f in 0..k {
            let mut factors: Vec<DMatrix<f64>> = self.op.factors().iter().map(|s| s.as_matrix().clone()).collect();
            factors[f] = DMatrix::identity(dims[f], dims[f]);
            let beta = kron_mvm(&factors, alpha)?;
            let g = mode_gram(alpha, &beta, &dims, f);
            let g = (&g + g.transpose()) * 0.5;

            let mut u = vec![0.0; dims[f]];
            let mut idx = vec![0usize; k];
            for &w in &inv {
                let mut others = 1.0;
                for (g_i, &i) in idx.iter().enumerate() {
                    if g_i != f {
                        others *= eigs[g_i].values[i];
                    }
                }
                u[idx[f]] += others * w;
                for ax in (0..k).rev() {
                    idx[ax] += 1;
                    if idx[ax] < dims[ax] {
                        break;
                    }
                    idx[ax] = 0;
                }
            }
            let q = &eigs[f].vectors;
            let mut qu = q.clone();
            for (j, mut col) in qu.column_iter_mut().enumerate() {
                col *= u[j];
            }
            let p = qu * q.transpose();
            factor_sens.push((g - p) * 0.5);
        }
        let d_noise = 0.5 * (alpha.iter().map(|a| a * a).sum::<f64>() - inv.iter().sum::<f64>());
        let d_mean = alpha.iter().sum();
        Ok(MllTerms {
            mll,
            factor_sens,
            d_noise,
            d_mean,
        })
    }

    fn check_cap(&self, m: usize) -> Result<()> {
        let size = m * self.outputs();
        if size > ORACLE_CAP {
            return Err(Error::OracleCap { size, cap: ORACLE_CAP });
        }
        Ok(())
    }

    /// Standardized predictive mean and covariance at normalized inputs.
    pub(crate) fn posterior_std(&self, xs: &DMatrix<f64>) -> Result<(Vec<f64>, DMatrix<f64>)> {
        let m = xs.nrows();
        self.check_cap(m)?;
        let t = self.outputs();
        let kxs = self.cross_cov(xs)?;
        let kss = self.test_cov(xs)?;
        let ksx = kxs.transpose();

        let mut mean_factors: Vec<&DMatrix<f64>> = vec![&ksx];
        mean_factors.extend(self.task_factors().iter().map(SymMatrix::as_matrix));
        let mut mean = kron_mvm(&mean_factors, &self.alpha)?;
        for v in &mut mean {
            *v += self.mean;
        }

        let eigs = self.op.eigen();
        let a = &ksx * &eigs[0].vectors;
        let q_t = kron_dense(&eigs[1..].iter().map(|e| e.vectors.clone()).collect::<Vec<_>>());
        let mut mu = vec![1.0];
        for e in &eigs[1..] {
            mu = mu.iter().flat_map(|&p| e.values.iter().map(move |&l| p * l)).collect();
        }
        let inv = self.op.inverse_spectrum();
        let n = self.n();

        // g[j] = μ_j K_** − A diag(μ_j² / D_{·j}) Aᵀ
        let mut blocks = Vec::with_capacity(t);
        for j in 0..t {
            let mut scaled = a.clone();
            for i in 0..n {
                let w = mu[j] * mu[j] * inv[i * t + j];
                scaled.column_mut(i).scale_mut(w);
            }
            blocks.push(kss.as_matrix() * mu[j] - scaled * a.transpose());
        }

        let mut cov = DMatrix::zeros(m * t, m * t);
        let mut wq = q_t.clone();
        for p in 0..m {
            for r in 0..=p {
                for j in 0..t {
                    let g = blocks[j][(p, r)];
                    wq.column_mut(j).zip_apply(&q_t.column(j), |w, q| *w = q * g);
                }
                let block = &wq * q_t.transpose();
                cov.view_mut((p * t, r * t), (t, t)).copy_from(&block);
                if p != r {
                    cov.view_mut((r * t, p * t), (t, t)).copy_from(&block.transpose());
                }
            }
        }
        Ok((mean, cov))
    }

    /// Dense predictive distribution. Capped at `m·T ≤ 4096`; larger
    /// problems go through the samplers.
    pub fn posterior(&self, x_test: &DMatrix<f64>) -> Result<PosteriorGaussian> {
        let xs = self.normalize(x_test)?;
        let (mut mean, mut cov) = self.posterior_std(&xs)?;
        self.output_scaling.unstandardize(&mut mean);
        let t = self.outputs();
        let s = &self.output_scaling.scale;
        let d = cov.nrows();
        for j in 0..d {
            for i in 0..d {
                cov[(i, j)] *= s[i % t] * s[j % t];
            }
        }
        Ok(PosteriorGaussian { mean, cov })
    }

    /// Diagonal of the predictive covariance, raw units, `m·T` point-major.
    pub fn posterior_variance_diag(&self, x_test: &DMatrix<f64>) -> Result<Vec<f64>> {
        let xs = self.normalize(x_test)?;
        let m = xs.nrows();
        let ksx = self.cross_cov(&xs)?.transpose();
        let eigs = self.op.eigen();
        let a = &ksx * &eigs[0].vectors;
        let mut sq = vec![a.component_mul(&a)];
        let mut prior_factors = vec![DMatrix::from_element(m, 1, self.kernel.outputscale())];
        for (e, k) in eigs[1..].iter().zip(self.task_factors()) {
            let b = k.as_matrix() * &e.vectors;
            sq.push(b.component_mul(&b));
            prior_factors.push(DMatrix::from_column_slice(k.order(), 1, k.as_matrix().diagonal().as_slice()));
        }
        let explained = kron_mvm(&sq, &self.op.inverse_spectrum())?;
        let prior = kron_mvm(&prior_factors, &[1.0])?;
        let t = self.outputs();
        let s = &self.output_scaling.scale;
        Ok(prior
            .iter()
            .zip(&explained)
            .enumerate()
            .map(|(i, (p, e))| (p - e).max(0.0) * s[i % t] * s[i % t])
            .collect())
    }
}

/// Anything that wraps a fitted [`KronGp`].
pub trait KronModel {
    fn gp(&self) -> &KronGp;
}

impl KronModel for KronGp {
    fn gp(&self) -> &KronGp {
        self
    }
}

/// Hex SHA-256 of the little-endian bytes of a float slice.
pub fn checksum(values: &[f64]) -> String {
    let mut h = Sha256::new();
    for v in values {
        h.update(v.to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Flattens an `n × d` matrix row by row.
pub fn row_major(x: &DMatrix<f64>) -> Vec<f64> {
    x.transpose().as_slice().to_vec()
}

pub fn from_row_major(rows: usize, cols: usize, data: &[f64]) -> Result<DMatrix<f64>> {
    if data.len() != rows * cols {
        return Err(shape_err(format!("expected {rows}x{cols} values, got {}", data.len())));
    }
    Ok(DMatrix::from_row_slice(rows, cols, data))
}
