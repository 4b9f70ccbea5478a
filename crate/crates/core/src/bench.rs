//! Timing harness for the posterior sampling engines on synthetic
//! multi-task models.

use std::fmt::Write as _;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::design::latin_hypercube;
use crate::error::{Error, Result};
use crate::gp::{GpParts, InputScaling, KronGp, OutputScaling, ORACLE_CAP};
use crate::kernels::MaternKernel;
use crate::linalg::SymMatrix;
use crate::sampler::{distributional_sample, hadamard_baseline_sample, hadamard_bytes, matheron_sample, Engine};

pub const CSV_HEADER: &str = "engine,n_train,n_test,tasks,samples,repeat,wall_ms,peak_bytes,status";

/// Four GiB.
pub const DEFAULT_MEMORY_BUDGET: u64 = 4 << 30;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchConfig {
    pub engines: Vec<Engine>,
    pub n_train: Vec<usize>,
    pub n_test: Vec<usize>,
    pub tasks: Vec<usize>,
    pub samples: Vec<usize>,
    pub repeats: usize,
    pub warmup: usize,
    pub memory_budget_bytes: u64,
    pub input_dim: usize,
    pub noise: f64,
}

impl Default for BenchConfig {
    fn default() -> Self {
        BenchConfig {
            engines: vec![Engine::Matheron, Engine::KronDistributional, Engine::Hadamard],
            n_train: vec![64],
            n_test: vec![16],
            tasks: vec![2, 4, 8],
            samples: vec![16],
            repeats: 5,
            warmup: 1,
            memory_budget_bytes: DEFAULT_MEMORY_BUDGET,
            input_dim: 2,
            noise: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BenchCase {
    pub engine: Engine,
    pub n_train: usize,
    pub n_test: usize,
    pub tasks: usize,
    pub samples: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BenchStatus {
    Ok,
    /// The pre-call estimate exceeds the memory budget.
    Oom,
    /// The dense posterior exceeds the oracle cap.
    Cap,
}

impl BenchStatus {
    pub fn name(self) -> &'static str {
        match self {
            BenchStatus::Ok => "ok",
            BenchStatus::Oom => "oom",
            BenchStatus::Cap => "cap",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRecord {
    pub case: BenchCase,
    pub repeats: usize,
    /// Median over the timed repeats; absent unless the status is `ok`.
    pub wall_ms: Option<f64>,
    /// Interquartile range of the timed repeats.
    pub wall_iqr_ms: Option<f64>,
    pub peak_bytes: u64,
    pub status: BenchStatus,
}

impl BenchRecord {
    pub fn csv_row(&self) -> String {
        let c = &self.case;
        let wall = self.wall_ms.map_or(String::new(), |w| format!("{w:.3}"));
        format!(
            "{},{},{},{},{},{},{},{},{}",
            c.engine.name(),
            c.n_train,
            c.n_test,
            c.tasks,
            c.samples,
            self.repeats,
            wall,
            self.peak_bytes,
            self.status.name()
        )
    }
}

pub fn to_csv(records: &[BenchRecord]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

impl BenchConfig {
    pub fn validate(&self) -> Result<()> {
        let lists = [&self.n_train, &self.n_test, &self.tasks, &self.samples];
        if self.engines.is_empty() || lists.iter().any(|l| l.is_empty() || l.contains(&0)) {
            return Err(Error::Config("every grid axis needs positive entries".into()));
        }
        if self.repeats < 3 {
            return Err(Error::Config(format!("need at least 3 timed repeats, got {}", self.repeats)));
        }
        if self.input_dim == 0 || !(self.noise > 0.0) {
            return Err(Error::Config("input_dim and noise must be positive".into()));
        }
        Ok(())
    }

    /// Grid cases in a fixed order, engines innermost.
    pub fn cases(&self) -> Vec<BenchCase> {
        let mut out = Vec::new();
        for &n_train in &self.n_train {
            for &n_test in &self.n_test {
                for &tasks in &self.tasks {
                    for &samples in &self.samples {
                        for &engine in &self.engines {
                            out.push(BenchCase {
                                engine,
                                n_train,
                                n_test,
                                tasks,
                                samples,
                            });
                        }
                    }
                }
            }
        }
        out
    }
}

/// Working-set estimate for the Kronecker engines.
pub fn kron_bytes(engine: Engine, n: usize, m: usize, t: usize, s: usize) -> u64 {
    let (n, m, t, s) = (n as u64, m as u64, t as u64, s as u64);
    let common = 3 * n * n + 3 * t * t + 2 * n * m + 2 * n * t;
    let extra = match engine {
        Engine::Matheron => 2 * m * m + 4 * s * (n + m) * t,
        _ => 3 * (m * t) * (m * t) + m * t * s,
    };
    8 * (common + extra)
}

pub fn estimate_bytes(case: &BenchCase) -> u64 {
    let BenchCase {
        engine,
        n_train,
        n_test,
        tasks,
        samples,
    } = *case;
    match engine {
        Engine::Hadamard => hadamard_bytes(n_train, n_test, tasks, samples),
        e => kron_bytes(e, n_train, n_test, tasks, samples),
    }
}

/// Multi-task GP with a Matérn kernel on Latin hypercube inputs and a
/// random full-rank task covariance. Responses are standard normal.
pub fn synthetic_model(n: usize, d: usize, t: usize, noise: f64, seed: u64) -> Result<KronGp> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let x = latin_hypercube(n, d, seed ^ 0x5eed);
    let mut c = DMatrix::<f64>::zeros(t, t);
    for j in 0..t {
        for i in j..t {
            c[(i, j)] = StandardNormal.sample(&mut rng);
        }
    }
    let mut kt = &c * c.transpose() / t as f64;
    for i in 0..t {
        kt[(i, i)] += 0.1;
    }
    let y: Vec<f64> = (0..n * t).map(|_| StandardNormal.sample(&mut rng)).collect();
    KronGp::new(GpParts {
        x,
        y,
        kernel: MaternKernel::isotropic(d, 0.3, 1.0)?,
        task_factors: vec![SymMatrix::new(kt)?],
        noise,
        mean: 0.0,
        input_scaling: InputScaling::identity(d),
        output_scaling: OutputScaling::identity(t),
    })
}

pub fn test_inputs(m: usize, d: usize, seed: u64) -> DMatrix<f64> {
    latin_hypercube(m, d, seed ^ 0x7e57)
}

fn run_once(engine: Engine, gp: &KronGp, xt: &DMatrix<f64>, s: usize, seed: u64, budget: u64) -> Result<()> {
    match engine {
        Engine::Matheron => matheron_sample(gp, xt, s, seed).map(drop),
        Engine::KronDistributional => distributional_sample(gp, xt, s, seed).map(drop),
        Engine::Hadamard => hadamard_baseline_sample(gp, xt, s, seed, budget).map(drop),
    }
}

/// Times one case: statuses come from the pre-call estimate and the cap,
/// and every timed call starts from a model with empty caches.
pub fn run_case(case: &BenchCase, config: &BenchConfig, seed: u64) -> Result<BenchRecord> {
    let peak_bytes = estimate_bytes(case);
    let mut record = BenchRecord {
        case: *case,
        repeats: config.repeats,
        wall_ms: None,
        wall_iqr_ms: None,
        peak_bytes,
        status: BenchStatus::Ok,
    };
    if case.engine == Engine::KronDistributional && case.n_test * case.tasks > ORACLE_CAP {
        record.status = BenchStatus::Cap;
        return Ok(record);
    }
    if peak_bytes > config.memory_budget_bytes {
        record.status = BenchStatus::Oom;
        return Ok(record);
    }
    let gp = synthetic_model(case.n_train, config.input_dim, case.tasks, config.noise, seed)?;
    let xt = test_inputs(case.n_test, config.input_dim, seed);
    let mut times = Vec::with_capacity(config.repeats);
    for rep in 0..config.warmup + config.repeats {
        let fresh = gp.clone();
        let start = Instant::now();
        match run_once(case.engine, &fresh, &xt, case.samples, seed.wrapping_add(rep as u64), config.memory_budget_bytes) {
            Ok(()) => {}
            Err(Error::Resource { .. }) => {
                record.status = BenchStatus::Oom;
                return Ok(record);
            }
            Err(e) => return Err(e),
        }
        if rep >= config.warmup {
            times.push(start.elapsed().as_secs_f64() * 1e3);
        }
    }
    record.wall_ms = Some(crate::stats::median(&times));
    record.wall_iqr_ms = Some(crate::stats::iqr(&times));
    Ok(record)
}

/// Runs the grid sequentially.
pub fn run_bench(config: &BenchConfig, seed: u64) -> Result<Vec<BenchRecord>> {
    config.validate()?;
    config.cases().iter().map(|c| run_case(c, config, seed)).collect()
}
