//! Adam with cosine learning-rate decay, and a box-bounded Nelder–Mead.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub steps: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Anneal the learning rate to zero along a half cosine.
    pub cosine: bool,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            steps: 250,
            lr: 0.05,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            cosine: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdamResult {
    pub params: Vec<f64>,
    /// Loss before each step.
    pub losses: Vec<f64>,
}

/// Minimizes `f`, which returns the loss and its gradient.
pub fn adam<F>(x0: &[f64], cfg: &AdamConfig, mut f: F) -> Result<AdamResult>
where
    F: FnMut(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    let mut x = x0.to_vec();
    let mut m = vec![0.0; x.len()];
    let mut v = vec![0.0; x.len()];
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let (loss, grad) = f(&x).map_err(|_| Error::Training { step })?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Training { step });
        }
        losses.push(loss);
        let lr = if cfg.cosine {
            cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * step as f64 / cfg.steps as f64).cos())
        } else {
            cfg.lr
        };
        let k = (step + 1) as i32;
        let (c1, c2) = (1.0 - cfg.beta1.powi(k), 1.0 - cfg.beta2.powi(k));
        for i in 0..x.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * grad[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
            x[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.eps);
        }
    }
    Ok(AdamResult { params: x, losses })
}

/// Maximizes `f` over the unit box from `start`, with at most `max_evals`
/// evaluations. Points are clamped onto the box before evaluation.
pub fn nelder_mead_max<F>(start: &[f64], step: f64, max_evals: usize, mut f: F) -> (Vec<f64>, f64)
where
    F: FnMut(&[f64]) -> f64,
{
    let d = start.len();
    let clamp = |p: &mut Vec<f64>| p.iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
    let mut evals = 0;
    let mut eval = |p: &[f64], evals: &mut usize| {
        *evals += 1;
        let v = f(p);
        if v.is_nan() { f64::NEG_INFINITY } else { v }
    };
    let mut simplex: Vec<(Vec<f64>, f64)> = Vec::with_capacity(d + 1);
    let mut s0 = start.to_vec();
    clamp(&mut s0);
    let v0 = eval(&s0, &mut evals);
    simplex.push((s0.clone(), v0));
    for i in 0..d {
        let mut p = s0.clone();
        p[i] = if p[i] + step <= 1.0 { p[i] + step } else { p[i] - step };
        clamp(&mut p);
        let v = eval(&p, &mut evals);
        simplex.push((p, v));
    }
    if d == 0 {
        return simplex.swap_remove(0);
    }
    while evals < max_evals {
        simplex.sort_by(|a, b| b.1.total_cmp(&a.1));
        let best = simplex[0].1;
        let worst = simplex[d].1;
        if (best - worst).abs() <= 1e-12 * best.abs().max(1e-12) {
            let spread = simplex
                .iter()
                .map(|(p, _)| p.iter().zip(&simplex[0].0).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max))
                .fold(0.0, f64::max);
            if spread < 1e-9 {
                break;
            }
        }
        let mut centroid = vec![0.0; d];
        for (p, _) in &simplex[..d] {
            for (c, v) in centroid.iter_mut().zip(p) {
                *c += v / d as f64;
            }
        }
        let along = |t: f64| -> Vec<f64> {
            let mut p: Vec<f64> = centroid.iter().zip(&simplex[d].0).map(|(c, w)| c + t * (c - w)).collect();
            clamp(&mut p);
            p
        };
        let xr = along(1.0);
        let fr = eval(&xr, &mut evals);
        if fr > simplex[0].1 {
            let xe = along(2.0);
            let fe = eval(&xe, &mut evals);
            simplex[d] = if fe > fr { (xe, fe) } else { (xr, fr) };
        } else if fr > simplex[d - 1].1 {
            simplex[d] = (xr, fr);
        } else {
            let (xc, fc) = if fr > simplex[d].1 {
                let p = along(0.5);
                let v = eval(&p, &mut evals);
                (p, v)
            } else {
                let p = along(-0.5);
                let v = eval(&p, &mut evals);
                (p, v)
            };
            if fc > simplex[d].1.max(fr) {
                simplex[d] = (xc, fc);
            } else {
                let best = simplex[0].0.clone();
                for item in simplex.iter_mut().skip(1) {
                    let mut p: Vec<f64> = best.iter().zip(&item.0).map(|(b, x)| b + 0.5 * (x - b)).collect();
                    clamp(&mut p);
                    let v = eval(&p, &mut evals);
                    *item = (p, v);
                }
            }
        }
    }
    simplex.sort_by(|a, b| b.1.total_cmp(&a.1));
    simplex.swap_remove(0)
}
