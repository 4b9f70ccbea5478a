//! Self-checks against dense reference computations and Monte Carlo
//! moments, reported with their measured margins.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::bench::{synthetic_model, test_inputs};
use crate::error::{Error, Result};
use crate::gp::KronModel;
use crate::linalg::{kron_dense, kron_mvm, KroneckerOperator, SymMatrix};
use crate::problems::{hartmann6, pollutant_concentration, PollutantProblem, HARTMANN6_ARGMIN, HARTMANN6_MIN};
use crate::sampler::{distributional_sample, matheron_sample, PathwiseSampler};
use crate::stats::{block_energy_test, moment_check};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifyLevel {
    Fast,
    Full,
}

impl VerifyLevel {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "fast" => Ok(VerifyLevel::Fast),
            "full" => Ok(VerifyLevel::Full),
            other => Err(Error::Config(format!("unknown verify level {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub measured: f64,
    pub threshold: f64,
    /// Distance to the threshold on the passing side; negative on failure.
    pub margin: f64,
    pub passed: bool,
}

impl Check {
    fn at_most(name: &str, measured: f64, threshold: f64) -> Self {
        let margin = threshold - measured;
        Check {
            name: name.into(),
            measured,
            threshold,
            margin,
            passed: measured <= threshold,
        }
    }

    fn at_least(name: &str, measured: f64, threshold: f64) -> Self {
        Check {
            name: name.into(),
            measured,
            threshold,
            margin: measured - threshold,
            passed: measured >= threshold,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub level: VerifyLevel,
    pub seed: u64,
    pub checks: Vec<Check>,
}

impl VerifyReport {
    pub fn passed(&self) -> bool {
        self.checks.iter().all(|c| c.passed)
    }

    pub fn summary(&self) -> String {
        let mut out = String::new();
        for c in &self.checks {
            out.push_str(&format!(
                "{} {:<28} measured {:.3e} threshold {:.3e} margin {:.3e}\n",
                if c.passed { "PASS" } else { "FAIL" },
                c.name,
                c.measured,
                c.threshold,
                c.margin
            ));
        }
        out
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn linalg_checks(seed: u64, checks: &mut Vec<Check>) -> Result<()> {
    let gp = synthetic_model(12, 2, 3, 0.05, seed)?;
    let factors: Vec<SymMatrix> = std::iter::once(gp.k_xx().clone()).chain(gp.task_factors().iter().cloned()).collect();
    let dense = kron_dense(&factors);
    let v: Vec<f64> = (0..dense.nrows()).map(|i| ((i * 37 % 11) as f64 - 5.0) / 5.0).collect();
    let mvm = kron_mvm(&factors, &v)?;
    let reference = &dense * nalgebra::DVector::from_column_slice(&v);
    checks.push(Check::at_most("kron_mvm", max_abs_diff(&mvm, reference.as_slice()), 1e-10));
    let mut worst_solve: f64 = 0.0;
    let mut worst_logdet: f64 = 0.0;
    for shift in [1e-4, 1e-2, 1.0] {
        let op = KroneckerOperator::new(factors.clone(), shift)?;
        let shifted = &dense + DMatrix::identity(dense.nrows(), dense.ncols()) * shift;
        let chol = shifted
            .clone()
            .cholesky()
            .ok_or_else(|| Error::Decomposition("dense reference is not positive definite".into()))?;
        let x = op.solve(&v)?;
        let x_ref = chol.solve(&nalgebra::DVector::from_column_slice(&v));
        let scale = x_ref.amax().max(1.0);
        worst_solve = worst_solve.max(max_abs_diff(&x, x_ref.as_slice()) / scale);
        let ld_ref = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        worst_logdet = worst_logdet.max((op.logdet()? - ld_ref).abs() / ld_ref.abs().max(1.0));
    }
    checks.push(Check::at_most("kron_solve", worst_solve, 1e-8));
    checks.push(Check::at_most("kron_logdet", worst_logdet, 1e-8));
    let shifted = &dense + DMatrix::identity(dense.nrows(), dense.ncols()) * gp.noise();
    let r: Vec<f64> = gp.y().iter().map(|y| y - gp.mean()).collect();
    let chol = shifted.cholesky().ok_or_else(|| Error::Decomposition("dense reference".into()))?;
    let alpha = chol.solve(&nalgebra::DVector::from_column_slice(&r));
    let nt = r.len() as f64;
    let mll_ref = -0.5 * alpha.dot(&nalgebra::DVector::from_column_slice(&r))
        - chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>()
        - 0.5 * nt * (2.0 * std::f64::consts::PI).ln();
    checks.push(Check::at_most("mll_dense", (gp.mll()? - mll_ref).abs() / mll_ref.abs().max(1.0), 1e-8));
    Ok(())
}

fn sampling_checks(level: VerifyLevel, seed: u64, checks: &mut Vec<Check>) -> Result<()> {
    let (draws, energy_draws) = match level {
        VerifyLevel::Fast => (5_000, 2_000),
        VerifyLevel::Full => (50_000, 20_000),
    };
    let gp = synthetic_model(8, 2, 3, 0.1, seed)?;
    let xt = test_inputs(4, 2, seed);
    let post = gp.posterior(&xt)?;
    let batch = matheron_sample(&gp, &xt, draws, seed)?;
    let report = moment_check(&batch.values, &post.mean, &post.cov)?;
    checks.push(Check::at_most("matheron_mean_z", report.max_mean_z, 4.0));
    checks.push(Check::at_least("matheron_cov_fraction", report.cov_fraction, 0.99));
    let pathwise = PathwiseSampler::new(gp.gp(), xt.nrows(), 8, seed)?;
    let direct = crate::sampler::matheron_sample_with(&gp, &xt, pathwise.base())?;
    checks.push(Check::at_most(
        "pathwise_agreement",
        max_abs_diff(&pathwise.sample(&xt)?, &direct.values),
        1e-9,
    ));
    let dim = xt.nrows() * gp.outputs();
    let m = matheron_sample(&gp, &xt, energy_draws, seed.wrapping_add(1))?;
    let h = distributional_sample(&gp, &xt, energy_draws, seed.wrapping_add(2))?;
    let test = block_energy_test(&m.values, &h.values, dim, 250.min(energy_draws / 8))?;
    checks.push(Check::at_least("energy_p_value", test.p_value, 0.01));
    Ok(())
}

fn problem_checks(checks: &mut Vec<Check>) {
    let p = PollutantProblem::default();
    let grid = p.eval_grid(&p.true_params).unwrap_or_default();
    let mut worst: f64 = 0.0;
    for (k, v) in grid.iter().enumerate() {
        let (s, t) = (p.locations[k / p.times.len()], p.times[k % p.times.len()]);
        worst = worst.max((v - pollutant_concentration(s, t, &p.true_params)).abs());
    }
    checks.push(Check::at_most("pollutant_grid", worst, 1e-12));
    checks.push(Check::at_most("hartmann_minimum", (hartmann6(&HARTMANN6_ARGMIN) - HARTMANN6_MIN).abs(), 1e-4));
}

pub fn run_verify(level: VerifyLevel, seed: u64) -> Result<VerifyReport> {
    let mut checks = Vec::new();
    linalg_checks(seed, &mut checks)?;
    sampling_checks(level, seed, &mut checks)?;
    problem_checks(&mut checks);
    Ok(VerifyReport { level, seed, checks })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_level_passes() {
        let r = run_verify(VerifyLevel::Fast, 7).unwrap();
        assert!(r.passed(), "{}", r.summary());
        assert!(r.checks.len() >= 9);
    }
}
