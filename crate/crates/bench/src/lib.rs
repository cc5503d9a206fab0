//! Shared fixtures for the criterion benchmarks in `benches/`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ste_core::{PiecewiseLinearPath, Tensor};

/// Uniform random `len × d` matrix in `[-1, 1)`.
pub fn random_matrix(len: usize, d: usize, seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = (0..len * d).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::matrix(len, d, data).expect("positive extents")
}

pub fn random_path(len: usize, d: usize, seed: u64) -> PiecewiseLinearPath {
    PiecewiseLinearPath::new(random_matrix(len, d, seed)).expect("matrix path")
}
