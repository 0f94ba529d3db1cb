//! Fixtures shared by the benchmarks.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand::rngs::StdRng;
use rand_distr::StandardNormal;

/// Gaussian design and a sparse linear response with unit noise.
pub fn regression_problem(n: usize, p: usize, seed: u64) -> (DMatrix<f64>, DVector<f64>) {
    let mut rng = StdRng::seed_from_u64(seed);
    let x = DMatrix::from_fn(n, p, |_, _| rng.sample::<f64, _>(StandardNormal));
    let beta = DVector::from_fn(p, |j, _| if j < p / 4 + 1 { 1.0 / (j + 1) as f64 } else { 0.0 });
    let noise = DVector::from_fn(n, |_, _| rng.sample::<f64, _>(StandardNormal));
    (x.clone(), x * beta + noise)
}

/// Standard normal point cloud, optionally shifted along every axis.
pub fn cloud(n: usize, d: usize, shift: f64, seed: u64) -> DMatrix<f64> {
    let mut rng = StdRng::seed_from_u64(seed);
    DMatrix::from_fn(n, d, |_, _| rng.sample::<f64, _>(StandardNormal) + shift)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fixtures_have_requested_shapes() {
        let (x, y) = regression_problem(20, 5, 1);
        assert_eq!((x.nrows(), x.ncols(), y.len()), (20, 5, 20));
        assert_eq!(cloud(7, 3, 0.5, 2).shape(), (7, 3));
    }
}
