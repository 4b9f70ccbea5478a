use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use kronmtgp::bench::{run_bench, to_csv, BenchConfig};
use kronmtgp::bo::{run_bo, BoConfig, BoTrace, ModelKind};
use kronmtgp::problems::problem_by_name;
use kronmtgp::stats::{iqr, median};
use kronmtgp::verify::{run_verify, VerifyLevel};

const THREADS_ENV: &str = "KRONMTGP_THREADS";

#[derive(Parser)]
#[command(name = "kronmtgp", version, about = "Kronecker multi-task GP sampling, BO and self-checks")]
struct Cli {
    #[arg(long, global = true, default_value_t = 0)]
    seed: u64,
    /// Parallel BO seeds; capped by KRONMTGP_THREADS when set.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Time the sampling engines over a grid and write CSV.
    BenchSampling {
        #[arg(long)]
        config: Option<PathBuf>,
        /// CSV path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run BO over several seeds, one trace per seed plus an index.
    BoRun {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value = "bo_out")]
        out: PathBuf,
        #[arg(long)]
        problem: Option<String>,
        #[arg(long)]
        model: Option<String>,
        #[arg(long)]
        seeds: Option<usize>,
    },
    /// Run the self-check suite; exits nonzero on any failure.
    Verify {
        #[arg(long, default_value = "fast")]
        level: String,
        /// JSON report path.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
struct BoRunConfig {
    problem: String,
    seeds: usize,
    bo: BoConfig,
}

impl Default for BoRunConfig {
    fn default() -> Self {
        BoRunConfig {
            problem: "pollutant".into(),
            seeds: 3,
            bo: BoConfig::default(),
        }
    }
}

#[derive(Debug, Serialize)]
struct IndexEntry {
    seed: u64,
    trace: String,
    final_incumbent: f64,
}

#[derive(Debug, Serialize)]
struct BoIndex {
    problem: String,
    model: ModelKind,
    runs: Vec<IndexEntry>,
    median_final_incumbent: f64,
    iqr_final_incumbent: f64,
}

fn read_config<T: for<'de> Deserialize<'de> + Default>(path: Option<&Path>) -> Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => {
            let text = fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", p.display()))
        }
    }
}

fn thread_count(jobs: usize) -> Result<usize> {
    let jobs = jobs.max(1);
    match std::env::var(THREADS_ENV) {
        Ok(v) => {
            let cap: usize = v.trim().parse().with_context(|| format!("{THREADS_ENV}={v:?} is not a count"))?;
            Ok(jobs.min(cap.max(1)))
        }
        Err(_) => Ok(jobs),
    }
}

fn bench_sampling(config: Option<&Path>, out: Option<&Path>, seed: u64) -> Result<()> {
    let cfg: BenchConfig = read_config(config)?;
    let records = run_bench(&cfg, seed)?;
    let csv = to_csv(&records);
    match out {
        Some(p) => fs::write(p, csv).with_context(|| format!("writing {}", p.display()))?,
        None => print!("{csv}"),
    }
    Ok(())
}

fn bo_run(
    config: Option<&Path>,
    out: &Path,
    overrides: (Option<String>, Option<String>, Option<usize>),
    seed: u64,
    pool: &rayon::ThreadPool,
) -> Result<()> {
    let mut cfg: BoRunConfig = read_config(config)?;
    if let Some(p) = overrides.0 {
        cfg.problem = p;
    }
    if let Some(m) = overrides.1 {
        cfg.bo.model = ModelKind::parse(&m)?;
    }
    if let Some(s) = overrides.2 {
        cfg.seeds = s;
    }
    if cfg.seeds == 0 {
        bail!("need at least one seed");
    }
    let problem = problem_by_name(&cfg.problem)?;
    fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
    let seeds: Vec<u64> = (0..cfg.seeds as u64).map(|k| seed + k).collect();
    let traces: Vec<BoTrace> = pool.install(|| {
        seeds
            .par_iter()
            .map(|&s| run_bo(problem.as_ref(), &cfg.bo, s))
            .collect::<kronmtgp::error::Result<Vec<_>>>()
    })?;
    let mut runs = Vec::with_capacity(traces.len());
    for trace in &traces {
        let name = format!("trace_{}_seed{}.json", cfg.bo.model.name(), trace.seed);
        fs::write(out.join(&name), trace.to_json()?)?;
        runs.push(IndexEntry {
            seed: trace.seed,
            trace: name,
            final_incumbent: trace.final_incumbent(),
        });
    }
    let finals: Vec<f64> = runs.iter().map(|r| r.final_incumbent).collect();
    let index = BoIndex {
        problem: cfg.problem.clone(),
        model: cfg.bo.model,
        median_final_incumbent: median(&finals),
        iqr_final_incumbent: iqr(&finals),
        runs,
    };
    fs::write(out.join("index.json"), serde_json::to_string_pretty(&index)?)?;
    println!(
        "{} {}: median final incumbent {:.6e} (IQR {:.3e}) over {} seeds",
        index.problem,
        index.model.name(),
        index.median_final_incumbent,
        index.iqr_final_incumbent,
        finals.len()
    );
    Ok(())
}

fn verify(level: &str, out: Option<&Path>, seed: u64) -> Result<bool> {
    let report = run_verify(VerifyLevel::parse(level)?, seed)?;
    print!("{}", report.summary());
    if let Some(p) = out {
        fs::write(p, serde_json::to_string_pretty(&report)?)?;
    }
    Ok(report.passed())
}

fn run(cli: Cli) -> Result<bool> {
    let pool = rayon::ThreadPoolBuilder::new().num_threads(thread_count(cli.jobs)?).build()?;
    match cli.command {
        Command::BenchSampling { config, out } => {
            bench_sampling(config.as_deref(), out.as_deref(), cli.seed)?;
            Ok(true)
        }
        Command::BoRun {
            config,
            out,
            problem,
            model,
            seeds,
        } => {
            bo_run(config.as_deref(), &out, (problem, model, seeds), cli.seed, &pool)?;
            Ok(true)
        }
        Command::Verify { level, out } => verify(&level, out.as_deref(), cli.seed),
    }
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(true) => ExitCode::SUCCESS,
        Ok(false) => ExitCode::from(1),
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
