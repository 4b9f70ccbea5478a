//! Monte Carlo checks used by tests and the verify command: moment
//! agreement with a reference Gaussian and a two-sample energy test.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Result};

/// Sample mean and covariance of `s` draws stored row-wise.
pub fn sample_moments(draws: &[f64], dim: usize) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if dim == 0 || draws.len() % dim != 0 || draws.len() < 2 * dim {
        return Err(shape_err("need at least two draws of matching length"));
    }
    let s = draws.len() / dim;
    let mut mean = DVector::zeros(dim);
    for row in draws.chunks(dim) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean /= s as f64;
    let mut cov = DMatrix::zeros(dim, dim);
    let mut c = vec![0.0; dim];
    for row in draws.chunks(dim) {
        for (ci, (v, m)) in c.iter_mut().zip(row.iter().zip(mean.iter())) {
            *ci = v - m;
        }
        for j in 0..dim {
            for i in 0..dim {
                cov[(i, j)] += c[i] * c[j];
            }
        }
    }
    cov /= (s - 1) as f64;
    Ok((mean, cov))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    pub samples: usize,
    /// Largest `|m̂ᵢ − μᵢ| / SEᵢ`.
    pub max_mean_z: f64,
    /// Fraction of covariance entries within `cov_z` standard errors.
    pub cov_fraction: f64,
    pub max_cov_z: f64,
}

impl MomentReport {
    /// Means within 4 SE and at least 99% of covariance entries within 4 SE.
    pub fn passes(&self) -> bool {
        self.max_mean_z <= 4.0 && self.cov_fraction >= 0.99
    }
}

/// Compares draws against `N(mean, cov)`. Covariance standard errors use
/// the Gaussian fourth moment `(Σᵢᵢ Σⱼⱼ + Σᵢⱼ²)/s`.
pub fn moment_check(draws: &[f64], mean: &[f64], cov: &DMatrix<f64>) -> Result<MomentReport> {
    let dim = mean.len();
    if cov.nrows() != dim || cov.ncols() != dim {
        return Err(shape_err("reference covariance does not match the mean"));
    }
    let (m_hat, c_hat) = sample_moments(draws, dim)?;
    let s = (draws.len() / dim) as f64;
    let floor = 1e-300;
    let mut max_mean_z: f64 = 0.0;
    for i in 0..dim {
        let se = (cov[(i, i)].max(0.0) / s).sqrt();
        let err = (m_hat[i] - mean[i]).abs();
        max_mean_z = max_mean_z.max(if se > floor { err / se } else if err > 1e-9 { f64::INFINITY } else { 0.0 });
    }
    let (mut within, mut total, mut max_cov_z) = (0usize, 0usize, 0.0f64);
    for j in 0..dim {
        for i in 0..=j {
            let var = (cov[(i, i)] * cov[(j, j)] + cov[(i, j)].powi(2)).max(0.0) / s;
            let err = (c_hat[(i, j)] - cov[(i, j)]).abs();
            let z = if var > floor { err / var.sqrt() } else if err > 1e-9 { f64::INFINITY } else { 0.0 };
            max_cov_z = max_cov_z.max(z);
            within += (z <= 4.0) as usize;
            total += 1;
        }
    }
    Ok(MomentReport {
        samples: s as usize,
        max_mean_z,
        cov_fraction: within as f64 / total as f64,
        max_cov_z,
    })
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
}

/// Unbiased energy distance between two equal-size samples.
pub fn energy_statistic(x: &[&[f64]], y: &[&[f64]]) -> f64 {
    let (n, m) = (x.len() as f64, y.len() as f64);
    let mut xy = 0.0;
    for a in x {
        for b in y {
            xy += dist(a, b);
        }
    }
    let within = |s: &[&[f64]]| {
        let mut acc = 0.0;
        for i in 0..s.len() {
            for j in i + 1..s.len() {
                acc += dist(s[i], s[j]);
            }
        }
        2.0 * acc
    };
    2.0 * xy / (n * m) - within(x) / (n * (n - 1.0)) - within(y) / (m * (m - 1.0))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EnergyTest {
    pub blocks: usize,
    pub block_size: usize,
    pub statistic: f64,
    pub z: f64,
    /// One-sided normal p-value of the block mean.
    pub p_value: f64,
}

impl EnergyTest {
    pub fn rejects(&self, alpha: f64) -> bool {
        self.p_value < alpha
    }
}

/// Two-sample energy test on row-wise draws, split into disjoint blocks
/// of `block_size`. The unbiased per-block statistics are independent with
/// mean zero under equal distributions, so their mean is compared to its
/// standard error.
pub fn block_energy_test(x: &[f64], y: &[f64], dim: usize, block_size: usize) -> Result<EnergyTest> {
    if dim == 0 || x.len() % dim != 0 || y.len() != x.len() || block_size < 2 {
        return Err(shape_err("energy test needs two equal-size samples"));
    }
    let xr: Vec<&[f64]> = x.chunks(dim).collect();
    let yr: Vec<&[f64]> = y.chunks(dim).collect();
    let blocks = xr.len() / block_size;
    if blocks < 2 {
        return Err(shape_err("energy test needs at least two blocks"));
    }
    let stats: Vec<f64> = (0..blocks)
        .map(|b| {
            let r = b * block_size..(b + 1) * block_size;
            energy_statistic(&xr[r.clone()], &yr[r])
        })
        .collect();
    let k = blocks as f64;
    let mean = stats.iter().sum::<f64>() / k;
    let var = stats.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (k - 1.0);
    let z = if var > 0.0 { mean / (var / k).sqrt() } else { 0.0 };
    let p_value = 1.0 - standard_normal_cdf(z);
    Ok(EnergyTest {
        blocks,
        block_size,
        statistic: mean,
        z,
        p_value,
    })
}

pub fn standard_normal_cdf(z: f64) -> f64 {
    0.5 * statrs::function::erf::erfc(-z / std::f64::consts::SQRT_2)
}

pub fn median(values: &[f64]) -> f64 {
    quantile(values, 0.5)
}

/// Linear-interpolation quantile; NaN for an empty slice.
pub fn quantile(values: &[f64], p: f64) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let h = p.clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (lo, hi) = (h.floor() as usize, h.ceil() as usize);
    v[lo] + (h - lo as f64) * (v[hi] - v[lo])
}

pub fn iqr(values: &[f64]) -> f64 {
    quantile(values, 0.75) - quantile(values, 0.25)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use rand_distr::{Distribution, StandardNormal};

    fn normals(n: usize, shift: f64, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n).map(|_| StandardNormal.sample(&mut rng)).map(|z: f64| z + shift).collect()
    }

    #[test]
    fn moments_of_standard_normals() {
        let d = normals(3 * 20000, 0.0, 1);
        let r = moment_check(&d, &[0.0; 3], &DMatrix::identity(3, 3)).unwrap();
        assert!(r.passes(), "{r:?}");
        let r = moment_check(&d, &[0.1; 3], &DMatrix::identity(3, 3)).unwrap();
        assert!(!r.passes());
    }

    #[test]
    fn energy_test_detects_shift_only() {
        let x = normals(2 * 4000, 0.0, 2);
        let y = normals(2 * 4000, 0.0, 3);
        assert!(!block_energy_test(&x, &y, 2, 200).unwrap().rejects(0.01));
        let y = normals(2 * 4000, 0.2, 3);
        assert!(block_energy_test(&x, &y, 2, 200).unwrap().rejects(0.01));
    }

    #[test]
    fn quantiles() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[1.0, 2.0, 3.0, 4.0]), 2.5);
        assert_eq!(iqr(&[1.0, 2.0, 3.0, 4.0, 5.0]), 2.0);
        assert!(median(&[]).is_nan());
    }
}
