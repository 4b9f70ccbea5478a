//! High-order GP over tensor-valued outputs. Each output axis `l` carries a
//! one-dimensional latent vector `v_l`, and its covariance is the Matérn
//! kernel evaluated on those latents, so the full covariance is
//! `K_XX ⊗ K(v₂) ⊗ … ⊗ K(v_k) + σ²I`.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{domain_err, shape_err, Error, Result};
use crate::gp::{checksum, from_row_major, row_major, GpParts, InputScaling, KronGp, KronModel, OutputScaling, PosteriorGaussian};
use crate::kernels::{matern25_grad, matern25_input_grad_1d, matern25_sym, MaternKernel, PriorSet};
use crate::linalg::SymMatrix;
use crate::optim::{adam, AdamConfig};

pub const MAX_AXES: usize = 5;
/// Diagonal jitter on the latent grid covariance.
const GRID_JITTER: f64 = 1e-6;

/// Inputs `n × d` and a full output tensor per input, flattened row-major
/// as `n × d₂ × … × d_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct TensorData {
    x: DMatrix<f64>,
    y: Vec<f64>,
    output_dims: Vec<usize>,
}

impl TensorData {
    pub fn new(x: DMatrix<f64>, y: Vec<f64>, output_dims: Vec<usize>) -> Result<Self> {
        if x.nrows() == 0 || x.ncols() == 0 {
            return Err(shape_err("tensor data needs at least one input"));
        }
        if output_dims.is_empty() || output_dims.contains(&0) {
            return Err(shape_err("output dims must be nonempty and positive"));
        }
        if output_dims.len() + 1 > MAX_AXES {
            return Err(shape_err(format!("at most {} output axes are supported", MAX_AXES - 1)));
        }
        let t: usize = output_dims.iter().product();
        if y.len() != x.nrows() * t {
            return Err(shape_err(format!("responses have length {}, expected {} x {t}", y.len(), x.nrows())));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(domain_err("tensor data contains missing or non-finite values"));
        }
        Ok(TensorData { x, y, output_dims })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &[f64] {
        &self.y
    }

    pub fn output_dims(&self) -> &[usize] {
        &self.output_dims
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn outputs(&self) -> usize {
        self.output_dims.iter().product()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LatentMode {
    /// Independent standard-normal latents.
    Random,
    /// A draw from a Matérn-5/2 GP over an even grid on `[0, 1]`, which also
    /// serves as the latents' prior during training.
    GpSmooth,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatentInit {
    pub mode: LatentMode,
    pub lengthscale: f64,
    pub seed: u64,
}

impl LatentInit {
    pub fn random(seed: u64) -> Self {
        LatentInit {
            mode: LatentMode::Random,
            lengthscale: 1.0,
            seed,
        }
    }

    pub fn gp_smooth(seed: u64) -> Self {
        LatentInit {
            mode: LatentMode::GpSmooth,
            lengthscale: 1.0,
            seed,
        }
    }
}

/// `d` evenly spaced points on `[0, 1]`, endpoints included.
pub fn latent_grid(d: usize) -> Vec<f64> {
    if d == 1 {
        return vec![0.0];
    }
    (0..d).map(|i| i as f64 / (d - 1) as f64).collect()
}

fn grid_cholesky(d: usize, lengthscale: f64) -> Result<Cholesky<f64, Dyn>> {
    let g = latent_grid(d);
    let k = MaternKernel::new(vec![lengthscale], 1.0)?;
    let mut m = matern25_sym(&DMatrix::from_column_slice(d, 1, &g), &k)?.into_inner();
    for i in 0..d {
        m[(i, i)] += GRID_JITTER;
    }
    m.cholesky()
        .ok_or_else(|| Error::Decomposition("latent grid covariance is not positive definite".into()))
}

/// Initial latent vectors, one per output axis, reproducible from the seed.
pub fn init_latents(output_dims: &[usize], init: &LatentInit) -> Result<Vec<Vec<f64>>> {
    let mut rng = ChaCha8Rng::seed_from_u64(init.seed);
    output_dims
        .iter()
        .map(|&d| {
            let z: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut rng)).collect();
            match init.mode {
                LatentMode::Random => Ok(z),
                LatentMode::GpSmooth => {
                    let ch = grid_cholesky(d, init.lengthscale)?;
                    Ok((ch.l() * DVector::from_vec(z)).as_slice().to_vec())
                }
            }
        })
        .collect()
}

/// Zero-mean Gaussian prior over one latent vector.
#[derive(Debug, Clone)]
struct LatentPrior {
    chol: Cholesky<f64, Dyn>,
    logdet: f64,
}

impl LatentPrior {
    fn new(d: usize, lengthscale: f64) -> Result<Self> {
        let chol = grid_cholesky(d, lengthscale)?;
        let logdet = 2.0 * chol.l().diagonal().iter().map(|v| v.ln()).sum::<f64>();
        Ok(LatentPrior { chol, logdet })
    }

    fn ln_pdf_grad(&self, v: &[f64]) -> (f64, Vec<f64>) {
        let d = v.len() as f64;
        let kv = self.chol.solve(&DVector::from_column_slice(v));
        let quad: f64 = kv.iter().zip(v).map(|(a, b)| a * b).sum();
        let value = -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + self.logdet + quad);
        (value, kv.iter().map(|g| -g).collect())
    }
}

/// Hyperparameters in standardized coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HogpHyper {
    pub lengthscales: Vec<f64>,
    pub outputscale: f64,
    pub latents: Vec<Vec<f64>>,
    pub latent_lengthscales: Vec<f64>,
    pub noise: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HogpConfig {
    pub adam: AdamConfig,
    pub priors: PriorSet,
    pub bounds: Option<(Vec<f64>, Vec<f64>)>,
    pub init_lengthscale: f64,
    pub init_outputscale: f64,
    pub init_latent_lengthscale: f64,
    pub init_noise: f64,
    pub noise_floor: f64,
}

impl Default for HogpConfig {
    fn default() -> Self {
        HogpConfig {
            adam: AdamConfig::default(),
            priors: PriorSet::default(),
            bounds: None,
            init_lengthscale: 0.5,
            init_outputscale: 1.0,
            init_latent_lengthscale: 1.0,
            init_noise: 0.1,
            noise_floor: 1e-6,
        }
    }
}

/// Gradient of the marginal log-likelihood in constrained coordinates.
#[derive(Debug, Clone)]
pub struct HogpGrad {
    pub lengthscales: Vec<f64>,
    pub outputscale: f64,
    pub latents: Vec<Vec<f64>>,
    pub latent_lengthscales: Vec<f64>,
    pub noise: f64,
    pub mean: f64,
}

#[derive(Debug, Clone)]
pub struct HogpModel {
    data: TensorData,
    hyper: HogpHyper,
    mode: LatentMode,
    gp: KronGp,
    losses: Vec<f64>,
}

impl KronModel for HogpModel {
    fn gp(&self) -> &KronGp {
        &self.gp
    }
}

fn latent_cov(v: &[f64], lengthscale: f64) -> Result<SymMatrix> {
    matern25_sym(&DMatrix::from_column_slice(v.len(), 1, v), &MaternKernel::new(vec![lengthscale], 1.0)?)
}

impl HogpModel {
    pub fn from_parts(
        data: TensorData,
        hyper: HogpHyper,
        mode: LatentMode,
        input_scaling: InputScaling,
        output_scaling: OutputScaling,
    ) -> Result<Self> {
        let dims = data.output_dims();
        if hyper.latents.len() != dims.len() || hyper.latent_lengthscales.len() != dims.len() {
            return Err(shape_err("one latent vector and latent lengthscale per output axis"));
        }
        for (v, &d) in hyper.latents.iter().zip(dims) {
            if v.len() != d {
                return Err(shape_err(format!("latent vector of length {} for an axis of size {d}", v.len())));
            }
        }
        if !(hyper.noise > 0.0) {
            return Err(domain_err(format!("noise must be positive, got {}", hyper.noise)));
        }
        let task_factors = hyper
            .latents
            .iter()
            .zip(&hyper.latent_lengthscales)
            .map(|(v, &l)| latent_cov(v, l))
            .collect::<Result<Vec<_>>>()?;
        let gp = KronGp::new(GpParts {
            x: input_scaling.apply(data.x())?,
            y: output_scaling.standardize(data.y()),
            kernel: MaternKernel::new(hyper.lengthscales.clone(), hyper.outputscale)?,
            task_factors,
            noise: hyper.noise,
            mean: hyper.mean,
            input_scaling,
            output_scaling,
        })?;
        Ok(HogpModel {
            data,
            hyper,
            mode,
            gp,
            losses: Vec::new(),
        })
    }

    /// Initial hyperparameters from `config` and latents from `init`,
    /// inputs scaled to the unit cube and outputs standardized globally.
    pub fn untrained(data: TensorData, init: &LatentInit, config: &HogpConfig) -> Result<Self> {
        let (xs, ys) = scalings(&data, config)?;
        let hyper = initial_hyper(&data, init, config)?;
        Self::from_parts(data, hyper, init.mode, xs, ys)
    }

    pub fn data(&self) -> &TensorData {
        &self.data
    }

    pub fn hyper(&self) -> &HogpHyper {
        &self.hyper
    }

    pub fn latent_mode(&self) -> LatentMode {
        self.mode
    }

    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn output_dims(&self) -> &[usize] {
        self.data.output_dims()
    }

    pub fn mll(&self) -> Result<f64> {
        self.gp.mll()
    }

    pub fn mll_grad(&self) -> Result<HogpGrad> {
        let terms = self.gp.mll_terms()?;
        let kg = matern25_grad(self.gp.x(), self.gp.kernel())?;
        let s0 = &terms.factor_sens[0];
        let lengthscales = kg.lengthscales.iter().map(|g| g.component_mul(s0).sum()).collect();
        let outputscale = kg.outputscale.component_mul(s0).sum();
        let mut latents = Vec::new();
        let mut latent_lengthscales = Vec::new();
        for (l, (v, &ls)) in self.hyper.latents.iter().zip(&self.hyper.latent_lengthscales).enumerate() {
            let s = &terms.factor_sens[l + 1];
            let x = DMatrix::from_column_slice(v.len(), 1, v);
            let g = matern25_grad(&x, &MaternKernel::new(vec![ls], 1.0)?)?;
            latent_lengthscales.push(g.lengthscales[0].component_mul(s).sum());
            let dk = matern25_input_grad_1d(v, ls, 1.0);
            latents.push((0..v.len()).map(|c| 2.0 * s.row(c).dot(&dk.row(c))).collect());
        }
        Ok(HogpGrad {
            lengthscales,
            outputscale,
            latents,
            latent_lengthscales,
            noise: terms.d_noise,
            mean: terms.d_mean,
        })
    }

    pub fn posterior(&self, x_test: &DMatrix<f64>) -> Result<PosteriorGaussian> {
        self.gp.posterior(x_test)
    }

    /// Per-output predictive variances, `m × d₂ × … × d_k` row-major.
    pub fn posterior_variance_diag(&self, x_test: &DMatrix<f64>) -> Result<Vec<f64>> {
        self.gp.posterior_variance_diag(x_test)
    }

    pub fn to_json(&self) -> Result<String> {
        let x = row_major(self.data.x());
        let doc = HogpDoc {
            kind: "hogp".into(),
            n: self.data.n(),
            d: self.data.x().ncols(),
            output_dims: self.data.output_dims().to_vec(),
            x_sha256: checksum(&x),
            y_sha256: checksum(self.data.y()),
            x,
            y: self.data.y().to_vec(),
            latent_mode: self.mode,
            hyper: self.hyper.clone(),
            input_scaling: self.gp.input_scaling().clone(),
            output_scaling: self.gp.output_scaling().clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: HogpDoc = serde_json::from_str(s)?;
        if doc.kind != "hogp" {
            return Err(Error::Config(format!("expected an hogp document, found {}", doc.kind)));
        }
        if checksum(&doc.x) != doc.x_sha256 || checksum(&doc.y) != doc.y_sha256 {
            return Err(Error::Config("training data checksum mismatch".into()));
        }
        let data = TensorData::new(from_row_major(doc.n, doc.d, &doc.x)?, doc.y, doc.output_dims)?;
        Self::from_parts(data, doc.hyper, doc.latent_mode, doc.input_scaling, doc.output_scaling)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct HogpDoc {
    kind: String,
    n: usize,
    d: usize,
    output_dims: Vec<usize>,
    x: Vec<f64>,
    y: Vec<f64>,
    x_sha256: String,
    y_sha256: String,
    latent_mode: LatentMode,
    hyper: HogpHyper,
    input_scaling: InputScaling,
    output_scaling: OutputScaling,
}

fn scalings(data: &TensorData, config: &HogpConfig) -> Result<(InputScaling, OutputScaling)> {
    let xs = match &config.bounds {
        Some((lo, hi)) => InputScaling::from_bounds(lo, hi)?,
        None => InputScaling::from_data(data.x())?,
    };
    Ok((xs, OutputScaling::global(data.y(), data.outputs())))
}

fn initial_hyper(data: &TensorData, init: &LatentInit, config: &HogpConfig) -> Result<HogpHyper> {
    let k = data.output_dims().len();
    Ok(HogpHyper {
        lengthscales: vec![config.init_lengthscale; data.x().ncols()],
        outputscale: config.init_outputscale,
        latents: init_latents(data.output_dims(), init)?,
        latent_lengthscales: vec![config.init_latent_lengthscale; k],
        noise: config.init_noise.max(2.0 * config.noise_floor),
        mean: 0.0,
    })
}

/// `[ln ℓ, ln s, ln(σ² − floor), mean, ln ℓ_latent, latents…]`.
struct Layout {
    d: usize,
    dims: Vec<usize>,
    floor: f64,
}

impl Layout {
    fn pack(&self, h: &HogpHyper) -> Vec<f64> {
        let mut p: Vec<f64> = h.lengthscales.iter().map(|l| l.ln()).collect();
        p.push(h.outputscale.ln());
        p.push((h.noise - self.floor).max(1e-300).ln());
        p.push(h.mean);
        p.extend(h.latent_lengthscales.iter().map(|l| l.ln()));
        for v in &h.latents {
            p.extend_from_slice(v);
        }
        p
    }

    fn unpack(&self, p: &[f64]) -> HogpHyper {
        let (d, k) = (self.d, self.dims.len());
        let mut at = d + 3 + k;
        let latents = self
            .dims
            .iter()
            .map(|&n| {
                let v = p[at..at + n].to_vec();
                at += n;
                v
            })
            .collect();
        HogpHyper {
            lengthscales: p[..d].iter().map(|v| v.exp()).collect(),
            outputscale: p[d].exp(),
            noise: self.floor + p[d + 1].exp(),
            mean: p[d + 2],
            latent_lengthscales: p[d + 3..d + 3 + k].iter().map(|v| v.exp()).collect(),
            latents,
        }
    }
}

struct Objective<'a> {
    data: &'a TensorData,
    layout: Layout,
    priors: PriorSet,
    mode: LatentMode,
    latent_priors: Vec<LatentPrior>,
    xs: InputScaling,
    ys: OutputScaling,
}

impl Objective<'_> {
    fn eval(&self, p: &[f64]) -> Result<(f64, Vec<f64>)> {
        let h = self.layout.unpack(p);
        let model = HogpModel::from_parts(self.data.clone(), h.clone(), self.mode, self.xs.clone(), self.ys.clone())?;
        let g = model.mll_grad()?;
        let pr = &self.priors;
        let d = self.layout.d;
        let mut value = model.mll()?;
        let mut grad = Vec::with_capacity(p.len());

        for (l, gl) in h.lengthscales.iter().zip(&g.lengthscales) {
            value += pr.lengthscale.ln_pdf(*l)? + l.ln();
            grad.push((gl + pr.lengthscale.d_ln_pdf(*l)) * l + 1.0);
        }
        let s = h.outputscale;
        value += pr.outputscale.ln_pdf(s)? + p[d];
        grad.push((g.outputscale + pr.outputscale.d_ln_pdf(s)) * s + 1.0);
        let raw = h.noise - self.layout.floor;
        value += pr.noise.ln_pdf(h.noise)? + p[d + 1];
        grad.push((g.noise + pr.noise.d_ln_pdf(h.noise)) * raw + 1.0);
        grad.push(g.mean);
        for (l, gl) in h.latent_lengthscales.iter().zip(&g.latent_lengthscales) {
            value += pr.lengthscale.ln_pdf(*l)? + l.ln();
            grad.push((gl + pr.lengthscale.d_ln_pdf(*l)) * l + 1.0);
        }
        for (a, (v, gv)) in h.latents.iter().zip(&g.latents).enumerate() {
            if let Some(lp) = self.latent_priors.get(a) {
                let (pv, pg) = lp.ln_pdf_grad(v);
                value += pv;
                grad.extend(gv.iter().zip(&pg).map(|(x, y)| x + y));
            } else {
                grad.extend_from_slice(gv);
            }
        }
        let scale = -1.0 / (self.data.n() * self.data.outputs()) as f64;
        Ok((value * scale, grad.into_iter().map(|v| v * scale).collect()))
    }
}

/// MAP fit over kernel hyperparameters, noise, mean, latent lengthscales
/// and the latents themselves.
pub fn hogp_fit(data: TensorData, init: &LatentInit, config: &HogpConfig) -> Result<HogpModel> {
    if data.n() < 2 {
        return Err(domain_err("fitting needs at least two training inputs"));
    }
    let (xs, ys) = scalings(&data, config)?;
    let start = initial_hyper(&data, init, config)?;
    let latent_priors = match init.mode {
        LatentMode::Random => Vec::new(),
        LatentMode::GpSmooth => data
            .output_dims()
            .iter()
            .map(|&d| LatentPrior::new(d, init.lengthscale))
            .collect::<Result<_>>()?,
    };
    let layout = Layout {
        d: data.x().ncols(),
        dims: data.output_dims().to_vec(),
        floor: config.noise_floor,
    };
    let x0 = layout.pack(&start);
    let obj = Objective {
        data: &data,
        layout,
        priors: config.priors,
        mode: init.mode,
        latent_priors,
        xs: xs.clone(),
        ys: ys.clone(),
    };
    let res = adam(&x0, &config.adam, |p| obj.eval(p))?;
    let hyper = if config.adam.steps == 0 { start } else { obj.layout.unpack(&res.params) };
    let mut model = HogpModel::from_parts(data, hyper, init.mode, xs, ys)?;
    model.losses = res.losses;
    Ok(model)
}

/// The smoothness test function `sin(2x·i)·cos(0.4y·j)` on an `d × d`
/// output grid plus `N(0, noise_sd²)` noise, at inputs `(x, y)` rows of `x`.
pub fn smooth_test_function(x: &DMatrix<f64>, d: usize, noise_sd: f64, seed: u64) -> Result<TensorData> {
    if x.ncols() != 2 {
        return Err(shape_err("the smoothness test function takes two inputs"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut y = Vec::with_capacity(x.nrows() * d * d);
    for r in 0..x.nrows() {
        for i in 0..d {
            for j in 0..d {
                let e: f64 = StandardNormal.sample(&mut rng);
                y.push((2.0 * x[(r, 0)] * i as f64).sin() * (0.4 * x[(r, 1)] * j as f64).cos() + noise_sd * e);
            }
        }
    }
    TensorData::new(x.clone(), y, vec![d, d])
}
