//! Block-design multi-task GP with an ICM kernel `k(x, x')·K_T[i, j]`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{domain_err, shape_err, Error, Result};
use crate::gp::{checksum, from_row_major, row_major, GpParts, InputScaling, KronGp, KronModel, OutputScaling, PosteriorGaussian};
use crate::kernels::{log_prior, matern25_grad, task_cov, MaternKernel, PriorInput, PriorSet, TaskCovFactor};
use crate::optim::{adam, AdamConfig};

/// Raw inputs `n × d` and responses `n × t`, every task observed at every
/// input.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainingData {
    x: DMatrix<f64>,
    y: DMatrix<f64>,
}

impl TrainingData {
    pub fn new(x: DMatrix<f64>, y: DMatrix<f64>) -> Result<Self> {
        if x.nrows() == 0 || x.ncols() == 0 || y.ncols() == 0 {
            return Err(shape_err("training data must have at least one input, dimension and task"));
        }
        if x.nrows() != y.nrows() {
            return Err(shape_err(format!("{} inputs but {} response rows", x.nrows(), y.nrows())));
        }
        if x.iter().chain(y.iter()).any(|v| !v.is_finite()) {
            return Err(domain_err("training data contains missing or non-finite values"));
        }
        Ok(TrainingData { x, y })
    }

    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }

    pub fn y(&self) -> &DMatrix<f64> {
        &self.y
    }

    pub fn n(&self) -> usize {
        self.x.nrows()
    }

    pub fn tasks(&self) -> usize {
        self.y.ncols()
    }

    /// `vec(Y)` point-major.
    pub fn y_vec(&self) -> Vec<f64> {
        row_major(&self.y)
    }
}

/// Hyperparameters in the model's standardized coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MtgpHyper {
    pub lengthscales: Vec<f64>,
    pub task_factor: TaskCovFactor,
    pub noise: f64,
    pub mean: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MtgpConfig {
    pub adam: AdamConfig,
    pub priors: PriorSet,
    /// Input box used for normalization; the data range when absent.
    pub bounds: Option<(Vec<f64>, Vec<f64>)>,
    pub init_lengthscale: f64,
    pub init_noise: f64,
    /// Lower bound on the noise variance during training.
    pub noise_floor: f64,
}

impl Default for MtgpConfig {
    fn default() -> Self {
        MtgpConfig {
            adam: AdamConfig::default(),
            priors: PriorSet::default(),
            bounds: None,
            init_lengthscale: 0.5,
            init_noise: 0.1,
            noise_floor: 1e-6,
        }
    }
}

/// Gradient of the marginal log-likelihood in constrained coordinates.
#[derive(Debug, Clone)]
pub struct MtgpGrad {
    pub lengthscales: Vec<f64>,
    pub noise: f64,
    pub mean: f64,
    /// `∂L/∂C`, lower triangular.
    pub task_factor: DMatrix<f64>,
}

#[derive(Debug, Clone)]
pub struct MtgpModel {
    data: TrainingData,
    hyper: MtgpHyper,
    gp: KronGp,
    losses: Vec<f64>,
}

impl KronModel for MtgpModel {
    fn gp(&self) -> &KronGp {
        &self.gp
    }
}

impl MtgpModel {
    /// Builds a model with fixed hyperparameters and explicit scalings.
    pub fn from_parts(
        data: TrainingData,
        hyper: MtgpHyper,
        input_scaling: InputScaling,
        output_scaling: OutputScaling,
    ) -> Result<Self> {
        let t = data.tasks();
        if hyper.task_factor.tasks() != t {
            return Err(shape_err(format!("task factor has {} tasks, data has {t}", hyper.task_factor.tasks())));
        }
        if !(hyper.noise > 0.0) {
            return Err(domain_err(format!("noise must be positive, got {}", hyper.noise)));
        }
        let x = input_scaling.apply(data.x())?;
        let y = output_scaling.standardize(&data.y_vec());
        let gp = KronGp::new(GpParts {
            x,
            y,
            kernel: MaternKernel::new(hyper.lengthscales.clone(), 1.0)?,
            task_factors: vec![task_cov(&hyper.task_factor)],
            noise: hyper.noise,
            mean: hyper.mean,
            input_scaling,
            output_scaling,
        })?;
        Ok(MtgpModel {
            data,
            hyper,
            gp,
            losses: Vec::new(),
        })
    }

    /// Fixed hyperparameters with the default normalization: inputs mapped
    /// onto the unit cube by their range, each task standardized.
    pub fn with_hyper(data: TrainingData, hyper: MtgpHyper) -> Result<Self> {
        let xs = InputScaling::from_data(data.x())?;
        let ys = OutputScaling::per_output(&data.y_vec(), data.tasks());
        Self::from_parts(data, hyper, xs, ys)
    }

    pub fn data(&self) -> &TrainingData {
        &self.data
    }

    pub fn hyper(&self) -> &MtgpHyper {
        &self.hyper
    }

    /// Training loss (negative normalized log posterior) per Adam step.
    pub fn losses(&self) -> &[f64] {
        &self.losses
    }

    pub fn tasks(&self) -> usize {
        self.data.tasks()
    }

    pub fn mll(&self) -> Result<f64> {
        self.gp.mll()
    }

    pub fn mll_grad(&self) -> Result<MtgpGrad> {
        let terms = self.gp.mll_terms()?;
        let kg = matern25_grad(self.gp.x(), self.gp.kernel())?;
        let s0 = &terms.factor_sens[0];
        let lengthscales = kg.lengthscales.iter().map(|g| g.component_mul(s0).sum()).collect();
        let c = self.hyper.task_factor.matrix();
        let task_factor = (&terms.factor_sens[1] * c * 2.0).lower_triangle();
        Ok(MtgpGrad {
            lengthscales,
            noise: terms.d_noise,
            mean: terms.d_mean,
            task_factor,
        })
    }

    pub fn posterior(&self, x_test: &DMatrix<f64>) -> Result<PosteriorGaussian> {
        self.gp.posterior(x_test)
    }

    pub fn posterior_variance_diag(&self, x_test: &DMatrix<f64>) -> Result<Vec<f64>> {
        self.gp.posterior_variance_diag(x_test)
    }

    pub fn to_json(&self) -> Result<String> {
        let doc = MtgpDoc {
            kind: "mtgp".into(),
            n: self.data.n(),
            d: self.data.x().ncols(),
            tasks: self.tasks(),
            x: row_major(self.data.x()),
            y: self.data.y_vec(),
            x_sha256: checksum(&row_major(self.data.x())),
            y_sha256: checksum(&self.data.y_vec()),
            hyper: self.hyper.clone(),
            input_scaling: self.gp.input_scaling().clone(),
            output_scaling: self.gp.output_scaling().clone(),
        };
        Ok(serde_json::to_string_pretty(&doc)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        let doc: MtgpDoc = serde_json::from_str(s)?;
        if doc.kind != "mtgp" {
            return Err(Error::Config(format!("expected an mtgp document, found {}", doc.kind)));
        }
        if checksum(&doc.x) != doc.x_sha256 || checksum(&doc.y) != doc.y_sha256 {
            return Err(Error::Config("training data checksum mismatch".into()));
        }
        let data = TrainingData::new(
            from_row_major(doc.n, doc.d, &doc.x)?,
            from_row_major(doc.n, doc.tasks, &doc.y)?,
        )?;
        Self::from_parts(data, doc.hyper, doc.input_scaling, doc.output_scaling)
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct MtgpDoc {
    kind: String,
    n: usize,
    d: usize,
    tasks: usize,
    x: Vec<f64>,
    y: Vec<f64>,
    x_sha256: String,
    y_sha256: String,
    hyper: MtgpHyper,
    input_scaling: InputScaling,
    output_scaling: OutputScaling,
}

/// Unconstrained layout: `[ln ℓ₁..ln ℓ_d, ln(σ² − floor), mean, C params]`.
struct Layout {
    d: usize,
    t: usize,
    floor: f64,
}

impl Layout {
    fn len(&self) -> usize {
        self.d + 2 + self.t * (self.t + 1) / 2
    }

    fn pack(&self, h: &MtgpHyper) -> Vec<f64> {
        let mut p: Vec<f64> = h.lengthscales.iter().map(|l| l.ln()).collect();
        p.push((h.noise - self.floor).max(1e-300).ln());
        p.push(h.mean);
        p.extend(h.task_factor.to_params());
        p
    }

    fn unpack(&self, p: &[f64]) -> Result<MtgpHyper> {
        let d = self.d;
        Ok(MtgpHyper {
            lengthscales: p[..d].iter().map(|v| v.exp()).collect(),
            noise: self.floor + p[d].exp(),
            mean: p[d + 1],
            task_factor: TaskCovFactor::from_params(self.t, &p[d + 2..])?,
        })
    }
}

/// Log prior over the task covariance: Gamma on each task variance and LKJ
/// on the implied correlation. Returns the value and `∂/∂K_T`.
fn task_prior(kt: &DMatrix<f64>, priors: &PriorSet) -> Result<(f64, DMatrix<f64>)> {
    let t = kt.nrows();
    let mut value = priors.task.ln_pdf_cov(kt)?;
    let mut grad = DMatrix::zeros(t, t);
    for i in 0..t {
        value += priors.outputscale.ln_pdf(kt[(i, i)])?;
        grad[(i, i)] += priors.outputscale.d_ln_pdf(kt[(i, i)]);
    }
    let eta = priors.task.eta;
    if eta != 1.0 {
        let inv = kt
            .clone()
            .try_inverse()
            .ok_or_else(|| domain_err("task covariance is singular"))?;
        for i in 0..t {
            for j in 0..t {
                grad[(i, j)] += (eta - 1.0) * inv[(i, j)];
            }
            grad[(i, i)] -= (eta - 1.0) / kt[(i, i)];
        }
    }
    Ok((value, grad))
}

struct Objective<'a> {
    data: &'a TrainingData,
    layout: Layout,
    priors: PriorSet,
    xs: InputScaling,
    ys: OutputScaling,
}

impl Objective<'_> {
    /// Negative log posterior over unconstrained coordinates, divided by
    /// the number of observations, and its gradient.
    fn eval(&self, p: &[f64]) -> Result<(f64, Vec<f64>)> {
        let h = self.layout.unpack(p)?;
        let model = MtgpModel::from_parts(self.data.clone(), h.clone(), self.xs.clone(), self.ys.clone())?;
        let g = model.mll_grad()?;
        let d = self.layout.d;
        let pr = &self.priors;

        let mut value = model.mll()?;
        value += log_prior(
            &PriorInput {
                noise: h.noise,
                lengthscales: &h.lengthscales,
                outputscales: &[],
                task_covariance: None,
            },
            pr,
        )?;
        let raw_noise = h.noise - self.layout.floor;
        value += p[..d].iter().sum::<f64>() + p[d];

        let mut grad = Vec::with_capacity(p.len());
        for (i, l) in h.lengthscales.iter().enumerate() {
            grad.push((g.lengthscales[i] + pr.lengthscale.d_ln_pdf(*l)) * l + 1.0);
        }
        grad.push((g.noise + pr.noise.d_ln_pdf(h.noise)) * raw_noise + 1.0);
        grad.push(g.mean);

        let c = h.task_factor.matrix();
        let kt = c * c.transpose();
        let (tv, tg) = task_prior(&kt, pr)?;
        value += tv;
        let dc = g.task_factor + (tg * c * 2.0).lower_triangle();
        let t = self.layout.t;
        for i in 0..t {
            for j in 0..=i {
                grad.push(if i == j { dc[(i, i)] * c[(i, i)] } else { dc[(i, j)] });
            }
        }
        let scale = -1.0 / (self.data.n() * t) as f64;
        Ok((value * scale, grad.into_iter().map(|v| v * scale).collect()))
    }
}

/// MAP fit of lengthscales, noise, constant mean and task covariance by
/// Adam. Deterministic: no randomness enters the fit.
pub fn fit(data: TrainingData, config: &MtgpConfig) -> Result<MtgpModel> {
    if data.n() < 2 {
        return Err(domain_err("fitting needs at least two training inputs"));
    }
    let d = data.x().ncols();
    let t = data.tasks();
    let xs = match &config.bounds {
        Some((lo, hi)) => InputScaling::from_bounds(lo, hi)?,
        None => InputScaling::from_data(data.x())?,
    };
    let ys = OutputScaling::per_output(&data.y_vec(), t);
    let layout = Layout {
        d,
        t,
        floor: config.noise_floor,
    };
    let init = MtgpHyper {
        lengthscales: vec![config.init_lengthscale; d],
        task_factor: TaskCovFactor::identity(t),
        noise: config.init_noise.max(config.noise_floor * 2.0),
        mean: 0.0,
    };
    let x0 = layout.pack(&init);
    debug_assert_eq!(x0.len(), layout.len());
    let obj = Objective {
        data: &data,
        layout,
        priors: config.priors,
        xs: xs.clone(),
        ys: ys.clone(),
    };
    let res = adam(&x0, &config.adam, |p| obj.eval(p))?;
    let hyper = if config.adam.steps == 0 { init } else { obj.layout.unpack(&res.params)? };
    let mut model = MtgpModel::from_parts(data, hyper, xs, ys)?;
    model.losses = res.losses;
    Ok(model)
}
