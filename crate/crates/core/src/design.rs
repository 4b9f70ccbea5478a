//! Space-filling designs on the unit box.

use nalgebra::DMatrix;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Seeded Latin hypercube: `n × d`, one point per stratum in every column.
pub fn latin_hypercube(n: usize, d: usize, seed: u64) -> DMatrix<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = DMatrix::zeros(n, d);
    let mut perm: Vec<usize> = (0..n).collect();
    for j in 0..d {
        perm.shuffle(&mut rng);
        for (i, &p) in perm.iter().enumerate() {
            out[(i, j)] = (p as f64 + rng.random::<f64>()) / n as f64;
        }
    }
    out
}

/// Maps unit-box rows onto `[lower, upper]`.
pub fn scale_to_box(u: &DMatrix<f64>, lower: &[f64], upper: &[f64]) -> DMatrix<f64> {
    DMatrix::from_fn(u.nrows(), u.ncols(), |i, j| lower[j] + u[(i, j)] * (upper[j] - lower[j]))
}
