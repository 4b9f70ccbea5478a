//! Bayesian optimization of composite objectives `g(f(x))`, where `f` is
//! modelled by a multi-task or high-order GP and `g` is known.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::design::{latin_hypercube, scale_to_box};
use crate::error::{domain_err, Error, Result};
use crate::gp::{checksum, KronGp, KronModel};
use crate::hogp::{hogp_fit, HogpConfig, HogpModel, LatentInit, LatentMode, TensorData};
use crate::mtgp::{fit, MtgpConfig, MtgpModel, TrainingData};
use crate::optim::{nelder_mead_max, AdamConfig};
use crate::problems::Problem;
use crate::sampler::{thompson_select, PathwiseSampler};

/// Objective assigned to evaluations that fail or return non-finite values.
pub const FAILURE_PENALTY: f64 = -1e5;

/// A named, thread-safe map from a model output vector to a scalar.
#[derive(Clone)]
pub struct CompositeObjective {
    name: String,
    f: Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>,
}

impl std::fmt::Debug for CompositeObjective {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("CompositeObjective").field("name", &self.name).finish()
    }
}

impl CompositeObjective {
    pub fn new(name: impl Into<String>, f: impl Fn(&[f64]) -> f64 + Send + Sync + 'static) -> Self {
        CompositeObjective {
            name: name.into(),
            f: Arc::new(f),
        }
    }

    /// The first output, for single-output models.
    pub fn identity() -> Self {
        Self::new("identity", |y| y[0])
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn eval(&self, y: &[f64]) -> f64 {
        (self.f)(y)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AcquisitionKind {
    QeiComposite,
    Thompson,
}

/// Fixed-sample acquisition settings: with `base_seed` fixed the Monte
/// Carlo estimate is a deterministic function of the candidates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AcquisitionSpec {
    pub kind: AcquisitionKind,
    pub q: usize,
    pub mc_samples: usize,
    pub base_seed: u64,
    /// Incumbent `f*`.
    pub best_f: f64,
}

impl AcquisitionSpec {
    pub fn qei(q: usize, mc_samples: usize, base_seed: u64, best_f: f64) -> Self {
        AcquisitionSpec {
            kind: AcquisitionKind::QeiComposite,
            q,
            mc_samples,
            base_seed,
            best_f,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.q == 0 || self.mc_samples == 0 {
            return Err(domain_err("q and the sample count must be positive"));
        }
        Ok(())
    }

    /// The base-draw sampler this spec fixes for `model`.
    pub fn sampler<'a, M: KronModel>(&self, model: &'a M) -> Result<PathwiseSampler<'a>> {
        self.validate()?;
        PathwiseSampler::new(model, self.q, self.mc_samples, self.base_seed)
    }
}

/// Composite qEI at the raw batch `x` (`q × d`): the sample mean of
/// `max(maxⱼ g(fⱼ) − f*, 0)` over the spec's base draws.
pub fn qei_composite<M: KronModel>(
    model: &M,
    x: &DMatrix<f64>,
    spec: &AcquisitionSpec,
    objective: &CompositeObjective,
) -> Result<f64> {
    let sampler = spec.sampler(model)?;
    qei_with_sampler(&sampler, x, &|y: &[f64]| objective.eval(y), spec.best_f)
}

/// [`qei_composite`] against a prepared sampler, for repeated evaluation.
pub fn qei_with_sampler(
    sampler: &PathwiseSampler<'_>,
    x: &DMatrix<f64>,
    g: &dyn Fn(&[f64]) -> f64,
    best_f: f64,
) -> Result<f64> {
    let draws = sampler.sample(x)?;
    let q = x.nrows();
    let t = draws.len() / (sampler.samples() * q).max(1);
    let mut acc = 0.0;
    for sample in draws.chunks(q * t) {
        let best = sample.chunks(t).map(g).fold(f64::NEG_INFINITY, f64::max);
        acc += (best - best_f).max(0.0);
    }
    Ok(acc / sampler.samples() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AcqOptConfig {
    pub raw_starts: usize,
    /// Best raw starts handed to Nelder–Mead.
    pub refine: usize,
    pub max_evals: usize,
    /// Initial simplex edge in unit-box coordinates.
    pub step: f64,
    pub seed: u64,
}

impl Default for AcqOptConfig {
    fn default() -> Self {
        AcqOptConfig {
            raw_starts: 64,
            refine: 8,
            max_evals: 200,
            step: 0.1,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AcqOptimum {
    /// `q × d` in raw coordinates.
    pub x: DMatrix<f64>,
    pub value: f64,
    pub raw_start_values: Vec<f64>,
}

fn check_bounds(lower: &[f64], upper: &[f64]) -> Result<()> {
    if lower.len() != upper.len() || lower.is_empty() {
        return Err(domain_err("bounds must be nonempty and of equal length"));
    }
    for (i, (l, u)) in lower.iter().zip(upper).enumerate() {
        if !l.is_finite() || !u.is_finite() || l > u {
            return Err(domain_err(format!("degenerate bounds in dimension {i}: [{l}, {u}]")));
        }
    }
    Ok(())
}

/// Maximizes `f` over batches of `q` points in `[lower, upper]`: a Latin
/// hypercube of raw starts, the best of which are refined by Nelder–Mead.
/// NaN values count as `−∞`.
pub fn optimize_acquisition<F>(
    f: F,
    lower: &[f64],
    upper: &[f64],
    q: usize,
    cfg: &AcqOptConfig,
) -> Result<AcqOptimum>
where
    F: Fn(&DMatrix<f64>) -> f64,
{
    check_bounds(lower, upper)?;
    if q == 0 || cfg.raw_starts == 0 {
        return Err(domain_err("need at least one point and one raw start"));
    }
    let d = lower.len();
    let to_raw = |u: &[f64]| DMatrix::from_fn(q, d, |i, j| lower[j] + u[i * d + j].clamp(0.0, 1.0) * (upper[j] - lower[j]));
    let score = |u: &[f64]| {
        let v = f(&to_raw(u));
        if v.is_nan() { f64::NEG_INFINITY } else { v }
    };
    if lower.iter().zip(upper).all(|(l, u)| l == u) {
        let u = vec![0.0; q * d];
        let value = score(&u);
        return Ok(AcqOptimum {
            x: to_raw(&u),
            value,
            raw_start_values: vec![value],
        });
    }
    let starts = latin_hypercube(cfg.raw_starts, q * d, cfg.seed);
    let mut ranked: Vec<(Vec<f64>, f64)> = (0..cfg.raw_starts)
        .map(|i| {
            let u: Vec<f64> = starts.row(i).iter().copied().collect();
            let v = score(&u);
            (u, v)
        })
        .collect();
    let raw_start_values: Vec<f64> = ranked.iter().map(|r| r.1).collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut best = ranked[0].clone();
    for (u, v) in ranked.iter().take(cfg.refine) {
        let (ur, vr) = nelder_mead_max(u, cfg.step, cfg.max_evals, &score);
        let cand = if vr > *v { (ur, vr) } else { (u.clone(), *v) };
        if cand.1 > best.1 {
            best = cand;
        }
    }
    Ok(AcqOptimum {
        x: to_raw(&best.0),
        value: best.1,
        raw_start_values,
    })
}

/// Maximizes composite qEI for `model` over `[lower, upper]` with the
/// spec's base draws held fixed.
pub fn optimize_qei<M: KronModel>(
    model: &M,
    spec: &AcquisitionSpec,
    objective: &CompositeObjective,
    lower: &[f64],
    upper: &[f64],
    cfg: &AcqOptConfig,
) -> Result<AcqOptimum> {
    check_bounds(lower, upper)?;
    let sampler = spec.sampler(model)?;
    let g = |y: &[f64]| objective.eval(y);
    optimize_acquisition(
        |x| qei_with_sampler(&sampler, x, &g, spec.best_f).unwrap_or(f64::NEG_INFINITY),
        lower,
        upper,
        spec.q,
        cfg,
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModelKind {
    /// Multi-task GP over the flattened outputs.
    Mtgp,
    /// High-order GP over the output tensor.
    Hogp,
    /// Single-output GP on the objective values, with expected improvement.
    SingleOutputOnMetric,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Mtgp => "mtgp",
            ModelKind::Hogp => "hogp",
            ModelKind::SingleOutputOnMetric => "single_output_on_metric",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "mtgp" => Ok(ModelKind::Mtgp),
            "hogp" => Ok(ModelKind::Hogp),
            "single_output_on_metric" | "ei_on_metric" => Ok(ModelKind::SingleOutputOnMetric),
            other => Err(Error::Config(format!("unknown model kind {other:?}"))),
        }
    }
}

/// A fitted surrogate of either family.
#[derive(Debug, Clone)]
pub enum Surrogate {
    Mtgp(MtgpModel),
    Hogp(HogpModel),
}

impl KronModel for Surrogate {
    fn gp(&self) -> &KronGp {
        match self {
            Surrogate::Mtgp(m) => m.gp(),
            Surrogate::Hogp(m) => m.gp(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BoConfig {
    pub model: ModelKind,
    pub n_init: usize,
    /// Total evaluations including the initial design.
    pub budget: usize,
    pub q: usize,
    pub mc_samples: usize,
    pub acquisition: AcquisitionKind,
    /// Candidate pool size for Thompson sampling.
    pub thompson_candidates: usize,
    pub adam: AdamConfig,
    pub acq: AcqOptConfig,
    pub latent_mode: LatentMode,
}

impl Default for BoConfig {
    fn default() -> Self {
        BoConfig {
            model: ModelKind::Hogp,
            n_init: 10,
            budget: 40,
            q: 1,
            mc_samples: 256,
            acquisition: AcquisitionKind::QeiComposite,
            thompson_candidates: 512,
            adam: AdamConfig::default(),
            acq: AcqOptConfig::default(),
            latent_mode: LatentMode::GpSmooth,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoIteration {
    pub index: usize,
    /// `init` for the initial design, `bo` afterwards.
    pub phase: String,
    pub candidate: Vec<f64>,
    /// Raw outputs; empty when the evaluation failed.
    pub outputs: Vec<f64>,
    pub output_digest: String,
    pub objective: f64,
    pub incumbent: f64,
    /// Surrogate used to propose this point.
    pub model: Option<ModelSummary>,
    pub wall_ms: f64,
}

/// Fitted hyperparameters in standardized coordinates.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelSummary {
    pub lengthscales: Vec<f64>,
    pub noise: f64,
    pub mean: f64,
    pub final_loss: Option<f64>,
}

impl ModelSummary {
    pub fn of(model: &Surrogate) -> Self {
        let gp = model.gp();
        let losses = match model {
            Surrogate::Mtgp(m) => m.losses(),
            Surrogate::Hogp(m) => m.losses(),
        };
        ModelSummary {
            lengthscales: gp.kernel().lengthscales().to_vec(),
            noise: gp.noise(),
            mean: gp.mean(),
            final_loss: losses.last().copied(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoTrace {
    pub problem: String,
    pub model: ModelKind,
    pub seed: u64,
    pub config: BoConfig,
    pub iterations: Vec<BoIteration>,
}

impl BoTrace {
    pub fn final_incumbent(&self) -> f64 {
        self.iterations.last().map_or(f64::NEG_INFINITY, |it| it.incumbent)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Deterministic stream of sub-seeds.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

struct Observation {
    x: Vec<f64>,
    outputs: Option<Vec<f64>>,
    objective: f64,
}

fn observe(problem: &dyn Problem, x: &[f64]) -> Observation {
    match problem.evaluate(x) {
        Ok(y) if y.iter().all(|v| v.is_finite()) => {
            let objective = problem.objective(&y);
            Observation {
                x: x.to_vec(),
                objective: if objective.is_finite() { objective } else { FAILURE_PENALTY },
                outputs: Some(y),
            }
        }
        Ok(y) => Observation {
            x: x.to_vec(),
            outputs: Some(y),
            objective: FAILURE_PENALTY,
        },
        Err(_) => Observation {
            x: x.to_vec(),
            outputs: None,
            objective: FAILURE_PENALTY,
        },
    }
}

/// Fits the surrogate for `kind` to the usable observations.
fn fit_surrogate(problem: &dyn Problem, obs: &[Observation], cfg: &BoConfig, seed: u64) -> Result<Surrogate> {
    let usable: Vec<&Observation> = obs
        .iter()
        .filter(|o| o.outputs.is_some() && o.objective != FAILURE_PENALTY)
        .collect();
    let d = problem.dim();
    let n = usable.len();
    let x = DMatrix::from_fn(n, d, |i, j| usable[i].x[j]);
    let bounds = Some(problem.bounds());
    let fit_mtgp = |y: DMatrix<f64>| -> Result<Surrogate> {
        let config = MtgpConfig {
            adam: cfg.adam,
            bounds: bounds.clone(),
            ..MtgpConfig::default()
        };
        let data = TrainingData::new(x.clone(), y)?;
        match fit(data.clone(), &config) {
            Ok(m) => Ok(Surrogate::Mtgp(m)),
            Err(Error::Training { .. }) => {
                let config = MtgpConfig {
                    adam: AdamConfig { steps: 0, ..cfg.adam },
                    ..config
                };
                Ok(Surrogate::Mtgp(fit(data, &config)?))
            }
            Err(e) => Err(e),
        }
    };
    match cfg.model {
        ModelKind::SingleOutputOnMetric => fit_mtgp(DMatrix::from_fn(n, 1, |i, _| usable[i].objective)),
        ModelKind::Mtgp => {
            let t = problem.outputs();
            fit_mtgp(DMatrix::from_fn(n, t, |i, j| usable[i].outputs.as_ref().expect("filtered")[j]))
        }
        ModelKind::Hogp => {
            let y: Vec<f64> = usable.iter().flat_map(|o| o.outputs.clone().expect("filtered")).collect();
            let data = TensorData::new(x, y, problem.output_dims())?;
            let init = LatentInit {
                mode: cfg.latent_mode,
                lengthscale: 1.0,
                seed,
            };
            let config = HogpConfig {
                adam: cfg.adam,
                bounds,
                ..HogpConfig::default()
            };
            match hogp_fit(data.clone(), &init, &config) {
                Ok(m) => Ok(Surrogate::Hogp(m)),
                Err(Error::Training { .. }) => Ok(Surrogate::Hogp(HogpModel::untrained(data, &init, &config)?)),
                Err(e) => Err(e),
            }
        }
    }
}

/// Next batch for a fitted surrogate: composite qEI maximized over the
/// problem box, or Thompson sampling over a Latin hypercube pool. The
/// composite is the problem's objective, or the identity when the model
/// already predicts the objective.
pub fn propose(
    problem: &dyn Problem,
    model: &Surrogate,
    cfg: &BoConfig,
    spec: &AcquisitionSpec,
) -> Result<DMatrix<f64>> {
    let g: &dyn Fn(&[f64]) -> f64 = match cfg.model {
        ModelKind::SingleOutputOnMetric => &|y: &[f64]| y[0],
        _ => &|y: &[f64]| problem.objective(y),
    };
    let (lower, upper) = problem.bounds();
    match spec.kind {
        AcquisitionKind::QeiComposite => {
            let sampler = spec.sampler(model)?;
            let opt = optimize_acquisition(
                |x| qei_with_sampler(&sampler, x, g, spec.best_f).unwrap_or(f64::NEG_INFINITY),
                &lower,
                &upper,
                spec.q,
                &AcqOptConfig {
                    seed: derive_seed(spec.base_seed, 1),
                    ..cfg.acq
                },
            )?;
            Ok(opt.x)
        }
        AcquisitionKind::Thompson => {
            let pool = cfg.thompson_candidates.max(spec.q);
            let u = latin_hypercube(pool, lower.len(), derive_seed(spec.base_seed, 2));
            let cands = scale_to_box(&u, &lower, &upper);
            let idx = thompson_select(model, &cands, spec.q, spec.base_seed, g)?;
            Ok(DMatrix::from_fn(idx.len(), lower.len(), |i, j| cands[(idx[i], j)]))
        }
    }
}

/// Runs BO on `problem` from a seeded Latin hypercube design. Every
/// evaluation, initial or proposed, becomes one trace entry.
pub fn run_bo(problem: &dyn Problem, cfg: &BoConfig, seed: u64) -> Result<BoTrace> {
    if cfg.n_init == 0 || cfg.budget < cfg.n_init {
        return Err(Error::Config(format!(
            "budget {} must cover a nonempty initial design of {}",
            cfg.budget, cfg.n_init
        )));
    }
    if cfg.q == 0 || cfg.mc_samples == 0 {
        return Err(Error::Config("q and mc_samples must be positive".into()));
    }
    let (lower, upper) = problem.bounds();
    check_bounds(&lower, &upper)?;
    let mut obs: Vec<Observation> = Vec::with_capacity(cfg.budget);
    let mut iterations = Vec::with_capacity(cfg.budget);
    let mut incumbent = f64::NEG_INFINITY;
    let mut record = |obs: &mut Vec<Observation>, o: Observation, phase: &str, model: Option<ModelSummary>, ms: f64| {
        incumbent = incumbent.max(o.objective);
        iterations.push(BoIteration {
            index: obs.len(),
            phase: phase.to_string(),
            candidate: o.x.clone(),
            outputs: o.outputs.clone().unwrap_or_default(),
            output_digest: o.outputs.as_deref().map_or_else(|| "failed".to_string(), checksum),
            objective: o.objective,
            incumbent,
            model,
            wall_ms: ms,
        });
        obs.push(o);
    };
    let design = scale_to_box(&latin_hypercube(cfg.n_init, lower.len(), derive_seed(seed, 0)), &lower, &upper);
    for i in 0..cfg.n_init {
        let start = Instant::now();
        let x: Vec<f64> = design.row(i).iter().copied().collect();
        let o = observe(problem, &x);
        record(&mut obs, o, "init", None, start.elapsed().as_secs_f64() * 1e3);
    }
    let mut round = 0u64;
    while obs.len() < cfg.budget {
        let start = Instant::now();
        round += 1;
        let q = cfg.q.min(cfg.budget - obs.len());
        let best_f = obs
            .iter()
            .map(|o| o.objective)
            .filter(|&v| v != FAILURE_PENALTY)
            .fold(f64::NEG_INFINITY, f64::max);
        let usable = obs.iter().filter(|o| o.objective != FAILURE_PENALTY).count();
        let (x, summary) = if usable < 2 || !best_f.is_finite() {
            let u = latin_hypercube(q, lower.len(), derive_seed(seed, 1000 + round));
            (scale_to_box(&u, &lower, &upper), None)
        } else {
            let model = fit_surrogate(problem, &obs, cfg, derive_seed(seed, 2000 + round))?;
            let spec = AcquisitionSpec {
                kind: cfg.acquisition,
                q,
                mc_samples: cfg.mc_samples,
                base_seed: derive_seed(seed, 3000 + round),
                best_f,
            };
            (propose(problem, &model, cfg, &spec)?, Some(ModelSummary::of(&model)))
        };
        let batch: Vec<Vec<f64>> = (0..q).map(|i| x.row(i).iter().copied().collect()).collect();
        let share = start.elapsed().as_secs_f64() * 1e3 / q as f64;
        for x in batch {
            let t0 = Instant::now();
            let o = observe(problem, &x);
            record(&mut obs, o, "bo", summary.clone(), share + t0.elapsed().as_secs_f64() * 1e3);
        }
    }
    Ok(BoTrace {
        problem: problem.name().to_string(),
        model: cfg.model,
        seed,
        config: cfg.clone(),
        iterations,
    })
}
