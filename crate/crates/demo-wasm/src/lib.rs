//! WebAssembly bindings for the browser demo in `www/`. Every export
//! returns a flat `Float64Array` whose layout is given in its doc.

use kronmtgp::design::latin_hypercube;
use kronmtgp::gp::{InputScaling, OutputScaling};
use kronmtgp::hogp::{smooth_test_function, HogpConfig, HogpModel, LatentInit};
use kronmtgp::kernels::TaskCovFactor;
use kronmtgp::mtgp::{MtgpHyper, MtgpModel, TrainingData};
use kronmtgp::problems::{pollutant_concentration, PollutantProblem, Problem, POLLUTANT_LOWER, POLLUTANT_UPPER};
use kronmtgp::sampler::matheron_sample;
use nalgebra::DMatrix;
use wasm_bindgen::prelude::*;

/// Points on the plotting grid of [`mtgp_paths`].
pub const GRID: usize = 120;

fn js_err(e: impl std::fmt::Display) -> JsValue {
    JsValue::from_str(&e.to_string())
}

/// Two correlated tasks observed at `n` evenly spaced inputs: a sine and a
/// shifted, scaled copy of it.
fn two_task_model(n: usize, correlation: f64, noise: f64) -> kronmtgp::error::Result<MtgpModel> {
    let n = n.max(2);
    let x = DMatrix::from_fn(n, 1, |i, _| 0.05 + 0.9 * i as f64 / (n - 1) as f64);
    let y = DMatrix::from_fn(n, 2, |i, j| {
        let v = (6.0 * x[(i, 0)]).sin();
        if j == 0 { v } else { 0.8 * (6.0 * x[(i, 0)] + 0.4).sin() }
    });
    let rho = correlation.clamp(-0.99, 0.99);
    let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, rho, (1.0 - rho * rho).sqrt()]);
    let hyper = MtgpHyper {
        lengthscales: vec![0.2],
        task_factor: TaskCovFactor::new(c)?,
        noise: noise.max(1e-8),
        mean: 0.0,
    };
    MtgpModel::from_parts(TrainingData::new(x, y)?, hyper, InputScaling::identity(1), OutputScaling::identity(2))
}

/// Matheron posterior paths of a two-task model on a grid over `[0, 1]`.
///
/// Layout: `[x (GRID) | training x (n) | training y (n × 2, row-major) |
/// mean (GRID × 2) | samples (s × GRID × 2)]`.
#[wasm_bindgen]
pub fn mtgp_paths(n: usize, correlation: f64, noise: f64, samples: usize, seed: u64) -> Result<Vec<f64>, JsValue> {
    let model = two_task_model(n, correlation, noise).map_err(js_err)?;
    let grid = DMatrix::from_fn(GRID, 1, |i, _| i as f64 / (GRID - 1) as f64);
    let post = model.posterior(&grid).map_err(js_err)?;
    let batch = matheron_sample(&model, &grid, samples.max(1), seed).map_err(js_err)?;
    let mut out: Vec<f64> = grid.iter().copied().collect();
    out.extend(model.data().x().iter());
    out.extend(model.data().y_vec());
    out.extend(post.mean);
    out.extend(batch.values);
    Ok(out)
}

/// Posterior variance over a `d × d` output grid at one test input, for an
/// untrained high-order GP on the smoothness test function.
///
/// Layout: `d·d` variances, row-major.
#[wasm_bindgen]
pub fn hogp_variance(d: usize, smooth: bool, seed: u64) -> Result<Vec<f64>, JsValue> {
    let d = d.clamp(2, 32);
    let x = latin_hypercube(16, 2, seed);
    let data = smooth_test_function(&x, d, 0.01, seed).map_err(js_err)?;
    let init = if smooth { LatentInit::gp_smooth(seed) } else { LatentInit::random(seed) };
    let model = HogpModel::untrained(data, &init, &HogpConfig::default()).map_err(js_err)?;
    model.posterior_variance_diag(&latin_hypercube(1, 2, seed ^ 0xabc)).map_err(js_err)
}

/// Pollutant concentration on a `rows × cols` grid over location
/// `[0, 3]` and time `[1, 60]`, for parameters clamped to the search box.
///
/// Layout: `[objective, concentrations (rows × cols, row-major by location)]`.
#[wasm_bindgen]
pub fn pollutant_field(mass: f64, diffusion: f64, location: f64, time: f64, rows: usize, cols: usize) -> Result<Vec<f64>, JsValue> {
    let raw = [mass, diffusion, location, time];
    let p: [f64; 4] = std::array::from_fn(|i| raw[i].clamp(POLLUTANT_LOWER[i], POLLUTANT_UPPER[i]));
    let problem = PollutantProblem::default();
    let objective = problem.objective(&problem.evaluate(&p).map_err(js_err)?);
    let (rows, cols) = (rows.clamp(2, 200), cols.clamp(2, 200));
    let mut out = Vec::with_capacity(1 + rows * cols);
    out.push(objective);
    for i in 0..rows {
        let s = 3.0 * i as f64 / (rows - 1) as f64;
        for j in 0..cols {
            let t = 1.0 + 59.0 * j as f64 / (cols - 1) as f64;
            out.push(pollutant_concentration(s, t, &p));
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn paths_have_the_documented_layout() {
        let (n, s) = (6, 3);
        let out = mtgp_paths(n, 0.7, 1e-4, s, 1).unwrap();
        assert_eq!(out.len(), GRID + n + 2 * n + 2 * GRID + s * GRID * 2);
        assert!(out.iter().all(|v| v.is_finite()));
        assert_eq!(out, mtgp_paths(n, 0.7, 1e-4, s, 1).unwrap());
    }

    #[test]
    fn smooth_latents_give_a_smoother_heatmap() {
        let tv = |v: &[f64], d: usize| {
            let across: f64 = (0..d * d).filter(|k| k % d + 1 < d).map(|k| (v[k + 1] - v[k]).abs()).sum();
            let down: f64 = (0..d * (d - 1)).map(|k| (v[k + d] - v[k]).abs()).sum();
            across + down
        };
        let a = hogp_variance(10, false, 3).unwrap();
        let b = hogp_variance(10, true, 3).unwrap();
        assert_eq!(a.len(), 100);
        assert!(tv(&b, 10) < tv(&a, 10));
    }

    #[test]
    fn pollutant_field_peaks_at_the_truth() {
        let p = PollutantProblem::default().true_params;
        let out = pollutant_field(p[0], p[1], p[2], p[3], 10, 12).unwrap();
        assert_eq!(out.len(), 121);
        assert_eq!(out[0], 0.0);
        assert!(pollutant_field(9.0, 0.05, 1.0, 30.2, 10, 12).unwrap()[0] < 0.0);
    }
}
