//! Seeded inputs for the criterion benchmarks under `benches/`.

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// `n` scores on a coarse grid so ties are common.
pub fn tied_scores(n: usize, shift: f64, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| (rng.random::<f64>() * 50.0).floor() / 50.0 + shift).collect()
}

pub fn gaussian_rows(n: usize, d: usize, offset: f64, seed: u64) -> Array2<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Array2::from_shape_fn((n, d), |_| {
        // Irwin-Hall approximation keeps this crate free of rand_distr.
        let s: f64 = (0..12).map(|_| rng.random::<f64>()).sum();
        s - 6.0 + offset
    })
}

pub fn labels(n: usize, classes: usize, seed: u64) -> Vec<i64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(0..classes as i64)).collect()
}
