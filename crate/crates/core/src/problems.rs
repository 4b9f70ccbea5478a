//! Benchmark problems with closed forms. Each maps a point in its box to a
//! vector or tensor of outputs; the scalar objective (to be maximized) is a
//! known function of those outputs.

use crate::error::{domain_err, Error, Result};

pub trait Problem: Send + Sync {
    fn name(&self) -> &str;
    fn bounds(&self) -> (Vec<f64>, Vec<f64>);
    /// Shape of one evaluation's outputs.
    fn output_dims(&self) -> Vec<usize>;
    fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>>;
    /// Composite objective `g` applied to outputs.
    fn objective(&self, outputs: &[f64]) -> f64;

    fn dim(&self) -> usize {
        self.bounds().0.len()
    }

    fn outputs(&self) -> usize {
        self.output_dims().iter().product()
    }
}

fn check_box(x: &[f64], lower: &[f64], upper: &[f64]) -> Result<()> {
    if x.len() != lower.len() {
        return Err(domain_err(format!("expected {} parameters, got {}", lower.len(), x.len())));
    }
    for (i, ((v, l), u)) in x.iter().zip(lower).zip(upper).enumerate() {
        if !(v >= l && v <= u) {
            return Err(domain_err(format!("parameter {i} = {v} outside [{l}, {u}]")));
        }
    }
    Ok(())
}

fn neg_mse(a: &[f64], b: &[f64]) -> f64 {
    -a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / a.len() as f64
}

/// Two spills of mass `M` in a 1-d channel with diffusion rate `D`, the
/// second at location `L` and time `τ`, observed on a space-time grid.
#[derive(Debug, Clone)]
pub struct PollutantProblem {
    pub locations: Vec<f64>,
    pub times: Vec<f64>,
    pub true_params: [f64; 4],
    target: Vec<f64>,
}

pub const POLLUTANT_LOWER: [f64; 4] = [7.0, 0.02, 0.01, 30.01];
pub const POLLUTANT_UPPER: [f64; 4] = [13.0, 0.12, 3.0, 30.295];

/// Concentration at location `s` and time `t`.
pub fn pollutant_concentration(s: f64, t: f64, p: &[f64; 4]) -> f64 {
    let [m, d, l, tau] = *p;
    let pi = std::f64::consts::PI;
    let first = m / (4.0 * pi * d * t).sqrt() * (-s * s / (4.0 * d * t)).exp();
    let second = if t > tau {
        m / (4.0 * pi * d * (t - tau)).sqrt() * (-(s - l).powi(2) / (4.0 * d * (t - tau))).exp()
    } else {
        0.0
    };
    first + second
}

impl Default for PollutantProblem {
    fn default() -> Self {
        let locations = vec![0.0, 1.0, 2.5];
        let times = vec![15.0, 30.0, 45.0, 60.0];
        let true_params = [10.0, 0.07, 1.505, 30.1525];
        let target = Self::grid(&locations, &times, &true_params);
        PollutantProblem {
            locations,
            times,
            true_params,
            target,
        }
    }
}

impl PollutantProblem {
    fn grid(locations: &[f64], times: &[f64], p: &[f64; 4]) -> Vec<f64> {
        locations
            .iter()
            .flat_map(|&s| times.iter().map(move |&t| pollutant_concentration(s, t, p)))
            .collect()
    }

    /// Concentrations on the `locations × times` grid, row-major.
    pub fn eval_grid(&self, params: &[f64]) -> Result<Vec<f64>> {
        check_box(params, &POLLUTANT_LOWER, &POLLUTANT_UPPER)?;
        let p = [params[0], params[1], params[2], params[3]];
        Ok(Self::grid(&self.locations, &self.times, &p))
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }
}

impl Problem for PollutantProblem {
    fn name(&self) -> &str {
        "pollutant"
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (POLLUTANT_LOWER.to_vec(), POLLUTANT_UPPER.to_vec())
    }

    fn output_dims(&self) -> Vec<usize> {
        vec![self.locations.len(), self.times.len()]
    }

    fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>> {
        self.eval_grid(x)
    }

    fn objective(&self, outputs: &[f64]) -> f64 {
        neg_mse(outputs, &self.target)
    }
}

pub fn pollutant_eval(params: &[f64]) -> Result<Vec<f64>> {
    PollutantProblem::default().eval_grid(params)
}

const HARTMANN_ALPHA: [f64; 4] = [1.0, 1.2, 3.0, 3.2];
const HARTMANN_A: [[f64; 6]; 4] = [
    [10.0, 3.0, 17.0, 3.5, 1.7, 8.0],
    [0.05, 10.0, 17.0, 0.1, 8.0, 14.0],
    [3.0, 3.5, 1.7, 10.0, 17.0, 8.0],
    [17.0, 8.0, 0.05, 10.0, 0.1, 14.0],
];
const HARTMANN_P: [[f64; 6]; 4] = [
    [0.1312, 0.1696, 0.5569, 0.0124, 0.8283, 0.5886],
    [0.2329, 0.4135, 0.8307, 0.3736, 0.1004, 0.9991],
    [0.2348, 0.1451, 0.3522, 0.2883, 0.3047, 0.6650],
    [0.4047, 0.8828, 0.8732, 0.5743, 0.1091, 0.0381],
];

/// Global minimizer of Hartmann-6 and its value.
pub const HARTMANN6_ARGMIN: [f64; 6] = [0.20169, 0.150011, 0.476874, 0.275332, 0.311652, 0.6573];
pub const HARTMANN6_MIN: f64 = -3.32237;

pub fn hartmann6(x: &[f64; 6]) -> f64 {
    -HARTMANN_ALPHA
        .iter()
        .zip(HARTMANN_A.iter().zip(&HARTMANN_P))
        .map(|(a, (row, p))| {
            let e: f64 = (0..6).map(|j| row[j] * (x[j] - p[j]).powi(2)).sum();
            a * (-e).exp()
        })
        .sum::<f64>()
}

/// Hartmann-6 split into tasks along its last coordinate.
#[derive(Debug, Clone)]
pub struct HartmannMtProblem {
    pub slices: Vec<f64>,
}

impl HartmannMtProblem {
    /// Evenly spaced slices `i/(t−1)`; a single task sits at `0.5`.
    pub fn new(t: usize) -> Result<Self> {
        if t == 0 {
            return Err(domain_err("task count must be positive"));
        }
        let slices = if t == 1 {
            vec![0.5]
        } else {
            (0..t).map(|i| i as f64 / (t - 1) as f64).collect()
        };
        Ok(HartmannMtProblem { slices })
    }

    pub fn with_slices(slices: Vec<f64>) -> Result<Self> {
        if slices.is_empty() || slices.iter().any(|c| !(0.0..=1.0).contains(c)) {
            return Err(domain_err("slice values must be nonempty and in [0, 1]"));
        }
        Ok(HartmannMtProblem { slices })
    }

    pub fn tasks(&self) -> usize {
        self.slices.len()
    }
}

impl Problem for HartmannMtProblem {
    fn name(&self) -> &str {
        "hartmann_mt"
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![0.0; 5], vec![1.0; 5])
    }

    fn output_dims(&self) -> Vec<usize> {
        vec![self.tasks()]
    }

    fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>> {
        hartmann_mt_eval(x, &self.slices)
    }

    /// Maximizes the negated task average.
    fn objective(&self, outputs: &[f64]) -> f64 {
        -outputs.iter().sum::<f64>() / outputs.len() as f64
    }
}

pub fn hartmann_mt_eval(x: &[f64], slices: &[f64]) -> Result<Vec<f64>> {
    check_box(x, &[0.0; 5], &[1.0; 5])?;
    Ok(slices
        .iter()
        .map(|&c| hartmann6(&[x[0], x[1], x[2], x[3], x[4], c]))
        .collect())
}

/// Separable wave pattern on a `d₂ × d₃` grid.
#[derive(Debug, Clone)]
pub struct WaveFieldProblem {
    pub rows: usize,
    pub cols: usize,
    pub true_params: [f64; 4],
    target: Vec<f64>,
}

impl WaveFieldProblem {
    pub fn new(rows: usize, cols: usize) -> Result<Self> {
        if rows == 0 || cols == 0 {
            return Err(domain_err("grid must be nonempty"));
        }
        let true_params = [0.3, 0.6, 0.7, 0.2];
        let target = Self::field(rows, cols, &true_params);
        Ok(WaveFieldProblem {
            rows,
            cols,
            true_params,
            target,
        })
    }

    fn field(rows: usize, cols: usize, p: &[f64; 4]) -> Vec<f64> {
        let tau = std::f64::consts::TAU;
        let mut out = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            let u = (tau * (p[0] * i as f64 / rows as f64 + p[1])).sin();
            for j in 0..cols {
                out.push(u * (tau * (p[2] * j as f64 / cols as f64 + p[3])).cos());
            }
        }
        out
    }

    pub fn target(&self) -> &[f64] {
        &self.target
    }
}

impl Default for WaveFieldProblem {
    fn default() -> Self {
        Self::new(16, 16).expect("default grid is nonempty")
    }
}

impl Problem for WaveFieldProblem {
    fn name(&self) -> &str {
        "wave_field"
    }

    fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        (vec![0.0; 4], vec![1.0; 4])
    }

    fn output_dims(&self) -> Vec<usize> {
        vec![self.rows, self.cols]
    }

    fn evaluate(&self, x: &[f64]) -> Result<Vec<f64>> {
        wave_field_eval(x, self.rows, self.cols)
    }

    fn objective(&self, outputs: &[f64]) -> f64 {
        neg_mse(outputs, &self.target)
    }
}

/// Unlike the BO search box, the periodic phases may take any finite value.
pub fn wave_field_eval(params: &[f64], rows: usize, cols: usize) -> Result<Vec<f64>> {
    if params.len() != 4 || params.iter().any(|v| !v.is_finite()) {
        return Err(domain_err("wave field takes four finite parameters"));
    }
    if !(0.0..=1.0).contains(&params[0]) || !(0.0..=1.0).contains(&params[2]) {
        return Err(domain_err("wave frequencies must lie in [0, 1]"));
    }
    Ok(WaveFieldProblem::field(rows, cols, &[params[0], params[1], params[2], params[3]]))
}

/// `pollutant`, `wave_field`, or `hartmann_mt` (four tasks) or
/// `hartmann_mt:<t>`.
pub fn problem_by_name(name: &str) -> Result<Box<dyn Problem>> {
    match name {
        "pollutant" => Ok(Box::new(PollutantProblem::default())),
        "wave_field" => Ok(Box::new(WaveFieldProblem::default())),
        "hartmann_mt" => Ok(Box::new(HartmannMtProblem::new(4)?)),
        other => {
            if let Some(t) = other.strip_prefix("hartmann_mt:") {
                let t = t
                    .parse()
                    .map_err(|_| Error::Config(format!("bad task count in {other:?}")))?;
                return Ok(Box::new(HartmannMtProblem::new(t)?));
            }
            Err(Error::Config(format!("unknown problem {other:?}")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pollutant_is_zero_at_truth_and_linear_in_mass() {
        let p = PollutantProblem::default();
        let truth = p.true_params;
        let g = p.evaluate(&truth).unwrap();
        assert_eq!(p.objective(&g), 0.0);
        assert!(g.iter().all(|&v| v > 0.0 && v.is_finite()));
        let base = [6.5, 0.05, 1.0, 30.1];
        assert!(p.evaluate(&base).is_err());
        let a = p.evaluate(&[7.0, 0.05, 1.0, 30.1]).unwrap();
        let b = p.evaluate(&[7.0 * 1.5, 0.05, 1.0, 30.1]).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((y - 1.5 * x).abs() < 1e-12 * y.abs());
        }
    }

    #[test]
    fn hartmann_slices() {
        let h = HartmannMtProblem::new(1).unwrap();
        assert_eq!(h.slices, vec![0.5]);
        assert_eq!(HartmannMtProblem::new(3).unwrap().slices, vec![0.0, 0.5, 1.0]);
        let dup = hartmann_mt_eval(&[0.1, 0.2, 0.3, 0.4, 0.5], &[0.3, 0.3]).unwrap();
        assert_eq!(dup[0], dup[1]);
        assert!(hartmann_mt_eval(&[1.1, 0.0, 0.0, 0.0, 0.0], &[0.5]).is_err());
    }

    #[test]
    fn wave_field_periodicity() {
        let p = [0.2, 0.4, 0.9, 0.1];
        let a = wave_field_eval(&p, 8, 8).unwrap();
        let b = wave_field_eval(&[0.2, 1.4, 0.9, 0.1], 8, 8).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-12);
        }
        let w = WaveFieldProblem::default();
        assert_eq!(w.objective(&w.evaluate(&w.true_params).unwrap()), 0.0);
    }

    #[test]
    fn registry() {
        assert_eq!(problem_by_name("pollutant").unwrap().output_dims(), vec![3, 4]);
        assert_eq!(problem_by_name("hartmann_mt:6").unwrap().outputs(), 6);
        assert!(matches!(problem_by_name("lunar"), Err(Error::Config(_))));
    }
}
