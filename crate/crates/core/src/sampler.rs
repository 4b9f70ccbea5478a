//! Posterior sampling engines over a fitted [`KronGp`]:
//!
//! * [`matheron_sample`] draws a joint prior sample over training and test
//!   points through the updated root `R̃ ⊗ L` and corrects it with one
//!   shifted Kronecker solve,
//! * [`distributional_sample`] factors the dense predictive covariance,
//! * [`hadamard_baseline_sample`] ignores all Kronecker structure and works
//!   on the dense `nT × nT` training covariance.
//!
//! Sample buffers are samples-major, then test points, then outputs.

use faer::dyn_stack::{MemBuffer, MemStack};
use faer::linalg::cholesky::llt::factor::{cholesky_in_place, cholesky_in_place_scratch};
use faer::linalg::matmul::matmul;
use faer::linalg::triangular_solve::solve_lower_triangular_in_place;
use faer::{Accum, Mat, Par};
use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{domain_err, shape_err, Error, Result};
use crate::gp::{KronGp, KronModel, ORACLE_CAP};
use crate::linalg::{kron_dense, kron_mvm_batch, mode_product, psd_root, root_update, schur_update, SymMatrix};

/// Standard-normal base samples. Sample `i` is drawn from its own ChaCha
/// stream, so the first `s` samples of a larger batch equal a batch of `s`.
#[derive(Debug, Clone, PartialEq)]
pub struct BaseDraws {
    pub seed: u64,
    pub samples: usize,
    pub z_len: usize,
    pub eps_len: usize,
    /// `samples × z_len`
    pub z: Vec<f64>,
    /// `samples × eps_len`, unit variance.
    pub eps: Vec<f64>,
}

impl BaseDraws {
    pub fn generate(seed: u64, samples: usize, z_len: usize, eps_len: usize) -> Self {
        let mut z = Vec::with_capacity(samples * z_len);
        let mut eps = Vec::with_capacity(samples * eps_len);
        for i in 0..samples {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(i as u64);
            z.extend((0..z_len).map(|_| -> f64 { StandardNormal.sample(&mut rng) }));
            eps.extend((0..eps_len).map(|_| -> f64 { StandardNormal.sample(&mut rng) }));
        }
        BaseDraws {
            seed,
            samples,
            z_len,
            eps_len,
            z,
            eps,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Engine {
    Matheron,
    KronDistributional,
    Hadamard,
}

impl Engine {
    pub fn name(self) -> &'static str {
        match self {
            Engine::Matheron => "matheron",
            Engine::KronDistributional => "kron_distributional",
            Engine::Hadamard => "hadamard",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "matheron" => Ok(Engine::Matheron),
            "kron_distributional" | "distributional" => Ok(Engine::KronDistributional),
            "hadamard" => Ok(Engine::Hadamard),
            other => Err(Error::Config(format!("unknown engine {other:?}"))),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SampleBatch {
    /// `[s, m, output dims…]`
    pub shape: Vec<usize>,
    pub values: Vec<f64>,
    pub base: BaseDraws,
    pub engine: Engine,
}

impl SampleBatch {
    pub fn samples(&self) -> usize {
        self.shape[0]
    }

    /// Entries per sample.
    pub fn sample_len(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn sample(&self, i: usize) -> &[f64] {
        let k = self.sample_len();
        &self.values[i * k..(i + 1) * k]
    }

    /// Little-endian layout: rank as `u64`, one `u64` per axis, then the
    /// values as `f64` in row-major order.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(8 * (1 + self.shape.len() + self.values.len()));
        out.extend((self.shape.len() as u64).to_le_bytes());
        for &d in &self.shape {
            out.extend((d as u64).to_le_bytes());
        }
        for v in &self.values {
            out.extend(v.to_le_bytes());
        }
        out
    }

    /// Inverse of [`to_bytes`](Self::to_bytes): shape and values.
    pub fn decode(bytes: &[u8]) -> Result<(Vec<usize>, Vec<f64>)> {
        let word = |i: usize| -> Result<[u8; 8]> {
            bytes
                .get(8 * i..8 * i + 8)
                .map(|b| b.try_into().expect("8-byte slice"))
                .ok_or_else(|| shape_err("sample buffer is truncated"))
        };
        let rank = u64::from_le_bytes(word(0)?) as usize;
        let shape = (0..rank)
            .map(|i| word(1 + i).map(|w| u64::from_le_bytes(w) as usize))
            .collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        if bytes.len() != 8 * (1 + rank + count) {
            return Err(shape_err("sample buffer length does not match its header"));
        }
        let values = (0..count)
            .map(|i| word(1 + rank + i).map(f64::from_le_bytes))
            .collect::<Result<Vec<_>>>()?;
        Ok((shape, values))
    }
}

fn batch_shape(gp: &KronGp, s: usize, m: usize) -> Vec<usize> {
    let mut shape = vec![s, m];
    shape.extend(gp.output_dims());
    shape
}

/// `(f, Y)` prior draws for every sample: `(R̃ ⊗ L₂ ⊗ … ⊗ L_k) z`, with the
/// training block first. No mean is added.
pub fn joint_prior_sample<M: KronModel>(model: &M, x_test: &DMatrix<f64>, base: &BaseDraws) -> Result<Vec<f64>> {
    let gp = model.gp();
    let xs = gp.normalize(x_test)?;
    joint_prior_std(gp, &xs, base)
}

fn joint_prior_std(gp: &KronGp, xs: &DMatrix<f64>, base: &BaseDraws) -> Result<Vec<f64>> {
    let (n, m, t) = (gp.n(), xs.nrows(), gp.outputs());
    if base.z_len != (n + m) * t {
        return Err(shape_err(format!("base draws have {} entries per sample, expected {}", base.z_len, (n + m) * t)));
    }
    let r = root_update(gp.data_root()?, &gp.cross_cov(xs)?, &gp.test_cov(xs)?, gp.jitter_policy())?;
    let roots = gp.task_roots()?;
    let mut factors: Vec<&DMatrix<f64>> = vec![r.matrix()];
    factors.extend(roots.iter().map(|l| l.matrix()));
    kron_mvm_batch(&factors, &base.z, base.samples)
}

/// Standardized Matheron samples for normalized test inputs.
fn matheron_std(gp: &KronGp, xs: &DMatrix<f64>, base: &BaseDraws) -> Result<Vec<f64>> {
    let (n, m, t) = (gp.n(), xs.nrows(), gp.outputs());
    let s = base.samples;
    if base.eps_len != n * t {
        return Err(shape_err("noise draws do not match the training size"));
    }
    let joint = joint_prior_std(gp, xs, base)?;
    let (nt, mt) = (n * t, m * t);
    let sigma = gp.noise().sqrt();
    let mut resid = Vec::with_capacity(s * nt);
    for i in 0..s {
        let y0 = &joint[i * (nt + mt)..i * (nt + mt) + nt];
        let eps = &base.eps[i * nt..(i + 1) * nt];
        resid.extend((0..nt).map(|k| gp.y()[k] - gp.mean() - y0[k] - sigma * eps[k]));
    }
    let w = gp.operator().solve_batch(&resid, s)?;
    let ksx = gp.cross_cov(xs)?.transpose();
    let mut factors: Vec<&DMatrix<f64>> = vec![&ksx];
    factors.extend(gp.task_factors().iter().map(SymMatrix::as_matrix));
    let update = kron_mvm_batch(&factors, &w, s)?;
    let mut out = Vec::with_capacity(s * mt);
    for i in 0..s {
        let f0 = &joint[i * (nt + mt) + nt..(i + 1) * (nt + mt)];
        out.extend((0..mt).map(|k| gp.mean() + f0[k] + update[i * mt + k]));
    }
    Ok(out)
}

/// Matheron samples with caller-supplied base draws.
pub fn matheron_sample_with<M: KronModel>(model: &M, x_test: &DMatrix<f64>, base: &BaseDraws) -> Result<SampleBatch> {
    let gp = model.gp();
    let xs = gp.normalize(x_test)?;
    let mut values = matheron_std(gp, &xs, base)?;
    gp.output_scaling().unstandardize(&mut values);
    Ok(SampleBatch {
        shape: batch_shape(gp, base.samples, xs.nrows()),
        values,
        base: base.clone(),
        engine: Engine::Matheron,
    })
}

pub fn matheron_sample<M: KronModel>(model: &M, x_test: &DMatrix<f64>, s: usize, seed: u64) -> Result<SampleBatch> {
    let gp = model.gp();
    let (n, m, t) = (gp.n(), x_test.nrows(), gp.outputs());
    let base = BaseDraws::generate(seed, s, (n + m) * t, n * t);
    matheron_sample_with(model, x_test, &base)
}

/// Samples `μ* + (Σ*)^{1/2} z` from the dense predictive covariance.
pub fn distributional_sample<M: KronModel>(model: &M, x_test: &DMatrix<f64>, s: usize, seed: u64) -> Result<SampleBatch> {
    let gp = model.gp();
    let xs = gp.normalize(x_test)?;
    let (mean, cov) = gp.posterior_std(&xs)?;
    let d = mean.len();
    let root = psd_root(&SymMatrix::new(cov)?, gp.jitter_policy())?;
    let base = BaseDraws::generate(seed, s, d, 0);
    let z = DMatrix::from_column_slice(d, s, &base.z);
    let mut values = (root.matrix() * z).as_slice().to_vec();
    for (i, v) in values.iter_mut().enumerate() {
        *v += mean[i % d];
    }
    gp.output_scaling().unstandardize(&mut values);
    Ok(SampleBatch {
        shape: batch_shape(gp, s, xs.nrows()),
        values,
        base,
        engine: Engine::KronDistributional,
    })
}

/// Bytes the dense baseline allocates for its covariance blocks.
pub fn hadamard_bytes(n: usize, m: usize, t: usize, s: usize) -> u64 {
    let (nt, mt) = ((n * t) as u64, (m * t) as u64);
    8 * (nt * nt + nt * mt + 2 * mt * mt + mt * s as u64 + 2 * nt)
}

fn dense_cholesky(a: &mut Mat<f64>, reference: f64) -> Result<()> {
    let n = a.nrows();
    let req = cholesky_in_place_scratch::<f64>(n, Par::Seq, Default::default());
    let mut buf = MemBuffer::new(req);
    let backup: Vec<f64> = (0..n).map(|i| a[(i, i)]).collect();
    for rung in [0.0, 1e-8, 1e-6, 1e-4] {
        let jitter = rung * reference;
        for i in 0..n {
            a[(i, i)] = backup[i] + jitter;
        }
        let stack = MemStack::new(&mut buf);
        if cholesky_in_place(a.as_mut(), Default::default(), Par::Seq, stack, Default::default()).is_ok() {
            for j in 0..n {
                for i in 0..j {
                    a[(i, j)] = 0.0;
                }
            }
            return Ok(());
        }
        // A failed attempt leaves a partially overwritten lower triangle;
        // the upper triangle still holds the original entries.
        for j in 0..n {
            for i in (j + 1)..n {
                a[(i, j)] = a[(j, i)];
            }
        }
    }
    for i in 0..n {
        a[(i, i)] = backup[i];
    }
    Err(Error::Decomposition("dense covariance is not positive definite after jitter".into()))
}

/// Dense baseline with no Kronecker structure: the `nT × nT` training
/// covariance is formed entrywise, factorized, and the predictive
/// covariance sampled through its own Cholesky factor.
pub fn hadamard_baseline_sample<M: KronModel>(
    model: &M,
    x_test: &DMatrix<f64>,
    s: usize,
    seed: u64,
    budget_bytes: u64,
) -> Result<SampleBatch> {
    let gp = model.gp();
    let xs = gp.normalize(x_test)?;
    let (n, m, t) = (gp.n(), xs.nrows(), gp.outputs());
    let needed = hadamard_bytes(n, m, t, s);
    if needed > budget_bytes {
        return Err(Error::Resource {
            needed,
            budget: budget_bytes,
        });
    }
    let (nt, mt) = (n * t, m * t);
    let kt = kron_dense(gp.task_factors());
    let kxx = gp.k_xx().as_matrix();
    let kxs = gp.cross_cov(&xs)?;
    let kss = gp.test_cov(&xs)?;
    let kss = kss.as_matrix();

    let mut l = Mat::<f64>::from_fn(nt, nt, |i, j| kxx[(i / t, j / t)] * kt[(i % t, j % t)] + if i == j { gp.noise() } else { 0.0 });
    let reference = (0..nt).map(|i| l[(i, i)]).sum::<f64>() / nt as f64;
    dense_cholesky(&mut l, reference)?;

    let mut v = Mat::<f64>::from_fn(nt, mt, |i, j| kxs[(i / t, j / t)] * kt[(i % t, j % t)]);
    solve_lower_triangular_in_place(l.as_ref(), v.as_mut(), Par::Seq);
    let mut a = Mat::<f64>::from_fn(nt, 1, |i, _| gp.y()[i] - gp.mean());
    solve_lower_triangular_in_place(l.as_ref(), a.as_mut(), Par::Seq);
    drop(l);

    let mut mean = Mat::<f64>::from_fn(mt, 1, |_, _| gp.mean());
    matmul(mean.as_mut(), Accum::Add, v.transpose(), a.as_ref(), 1.0, Par::Seq);
    let mut cov = Mat::<f64>::from_fn(mt, mt, |i, j| kss[(i / t, j / t)] * kt[(i % t, j % t)]);
    matmul(cov.as_mut(), Accum::Add, v.transpose(), v.as_ref(), -1.0, Par::Seq);
    drop(v);
    for j in 0..mt {
        for i in (j + 1)..mt {
            let avg = 0.5 * (cov[(i, j)] + cov[(j, i)]);
            cov[(i, j)] = avg;
            cov[(j, i)] = avg;
        }
    }
    let reference = (0..mt).map(|i| kss[(i / t, i / t)] * kt[(i % t, i % t)]).sum::<f64>() / mt as f64;
    let root = match dense_cholesky(&mut cov, reference) {
        Ok(()) => cov,
        Err(_) => {
            let dense = DMatrix::from_fn(mt, mt, |i, j| cov[(i, j)]);
            let r = psd_root(&SymMatrix::new(dense)?, gp.jitter_policy())?;
            Mat::from_fn(mt, mt, |i, j| r.matrix()[(i, j)])
        }
    };

    let base = BaseDraws::generate(seed, s, mt, 0);
    let z = Mat::<f64>::from_fn(mt, s, |i, j| base.z[j * mt + i]);
    let mut out = Mat::<f64>::from_fn(mt, s, |i, _| mean[(i, 0)]);
    matmul(out.as_mut(), Accum::Add, root.as_ref(), z.as_ref(), 1.0, Par::Seq);
    let mut values = Vec::with_capacity(mt * s);
    for j in 0..s {
        values.extend((0..mt).map(|i| out[(i, j)]));
    }
    gp.output_scaling().unstandardize(&mut values);
    Ok(SampleBatch {
        shape: batch_shape(gp, s, m),
        values,
        base,
        engine: Engine::Hadamard,
    })
}

/// Indices of `q` candidates, one per slot: each slot draws its own joint
/// sample over all candidates and takes the best not yet chosen.
pub fn thompson_select<M: KronModel, F: Fn(&[f64]) -> f64>(
    model: &M,
    candidates: &DMatrix<f64>,
    q: usize,
    seed: u64,
    objective: F,
) -> Result<Vec<usize>> {
    let m = candidates.nrows();
    if m == 0 {
        return Err(domain_err("thompson selection needs at least one candidate"));
    }
    if q > m {
        return Err(domain_err(format!("cannot select {q} of {m} candidates without replacement")));
    }
    let batch = matheron_sample(model, candidates, q, seed)?;
    let t = model.gp().outputs();
    let mut chosen: Vec<usize> = Vec::with_capacity(q);
    for slot in 0..q {
        let draw = batch.sample(slot);
        let mut best: Option<(usize, f64)> = None;
        for c in (0..m).filter(|c| !chosen.contains(c)) {
            let v = objective(&draw[c * t..(c + 1) * t]);
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((c, v));
            }
        }
        chosen.push(best.expect("at least one unchosen candidate").0);
    }
    Ok(chosen)
}

/// Matheron sampling at a fixed batch size `q` with fixed base draws,
/// precomputing everything that does not depend on the test inputs. For
/// each evaluation only the cross covariances, `L₁₂`, `L₂₂` and three
/// mode products remain. Results agree with [`matheron_sample_with`] on
/// the same draws up to rounding.
#[derive(Debug, Clone)]
pub struct PathwiseSampler<'a> {
    gp: &'a KronGp,
    q: usize,
    base: BaseDraws,
    /// `(I ⊗ L) z_train`, `s × n × T`
    u_train: Vec<f64>,
    /// `(I ⊗ L) z_test`, `s × q × T`
    u_test: Vec<f64>,
    /// `(I ⊗ K_T) w`, `s × n × T`
    v: Vec<f64>,
}

impl<'a> PathwiseSampler<'a> {
    pub fn new<M: KronModel>(model: &'a M, q: usize, samples: usize, seed: u64) -> Result<Self> {
        let gp = model.gp();
        let (n, t) = (gp.n(), gp.outputs());
        let base = BaseDraws::generate(seed, samples, (n + q) * t, n * t);
        Self::with_base(gp, q, base)
    }

    pub fn with_base(gp: &'a KronGp, q: usize, base: BaseDraws) -> Result<Self> {
        let (n, t, s) = (gp.n(), gp.outputs(), base.samples);
        if base.z_len != (n + q) * t || base.eps_len != n * t {
            return Err(shape_err("base draws do not match the batch size"));
        }
        let (nt, qt) = (n * t, q * t);
        let mut z_train = Vec::with_capacity(s * nt);
        let mut z_test = Vec::with_capacity(s * qt);
        for i in 0..s {
            let z = &base.z[i * (nt + qt)..(i + 1) * (nt + qt)];
            z_train.extend_from_slice(&z[..nt]);
            z_test.extend_from_slice(&z[nt..]);
        }
        let roots = gp.task_roots()?;
        let l: Vec<&DMatrix<f64>> = roots.iter().map(|r| r.matrix()).collect();
        let u_train = kron_mvm_batch(&l, &z_train, s * n)?;
        let u_test = kron_mvm_batch(&l, &z_test, s * q)?;
        let y0 = mode_product(&u_train, &[s, n, t], 1, gp.data_root()?.matrix());
        let sigma = gp.noise().sqrt();
        let resid: Vec<f64> = (0..s * nt)
            .map(|k| gp.y()[k % nt] - gp.mean() - y0[k] - sigma * base.eps[k])
            .collect();
        let w = gp.operator().solve_batch(&resid, s)?;
        let v = kron_mvm_batch(gp.task_factors(), &w, s * n)?;
        Ok(PathwiseSampler {
            gp,
            q,
            base,
            u_train,
            u_test,
            v,
        })
    }

    pub fn samples(&self) -> usize {
        self.base.samples
    }

    pub fn base(&self) -> &BaseDraws {
        &self.base
    }

    /// Raw-scale samples `s × q × T` at the raw inputs `x_test` (`q × d`).
    pub fn sample(&self, x_test: &DMatrix<f64>) -> Result<Vec<f64>> {
        let xs = self.gp.normalize(x_test)?;
        let mut out = self.sample_normalized(&xs)?;
        self.gp.output_scaling().unstandardize(&mut out);
        Ok(out)
    }

    /// Standardized samples at normalized inputs.
    pub fn sample_normalized(&self, xs: &DMatrix<f64>) -> Result<Vec<f64>> {
        if xs.nrows() != self.q {
            return Err(shape_err(format!("sampler was built for {} points, got {}", self.q, xs.nrows())));
        }
        let gp = self.gp;
        let (n, t, s, q) = (gp.n(), gp.outputs(), self.base.samples, self.q);
        let kxs = gp.cross_cov(xs)?;
        let (l12, l22) = schur_update(gp.data_root()?, &kxs, &gp.test_cov(xs)?, gp.jitter_policy())?;
        let a = mode_product(&self.u_train, &[s, n, t], 1, &l12);
        let b = mode_product(&self.u_test, &[s, q, t], 1, l22.matrix());
        let c = mode_product(&self.v, &[s, n, t], 1, &kxs.transpose());
        Ok((0..s * q * t).map(|k| gp.mean() + a[k] + b[k] + c[k]).collect())
    }
}

/// Checks whether `m·T` fits under the dense oracle cap.
pub fn within_oracle_cap(gp: &KronGp, m: usize) -> bool {
    m * gp.outputs() <= ORACLE_CAP
}
