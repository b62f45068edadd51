//! Seeded inputs shared by the benchmarks.

use plumeseg_core::spectral::PlumeMask;
use plumeseg_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Tensor of the given shape with entries uniform in `[-1, 1)`.
pub fn random_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).expect("shape matches data")
}

/// Square mask where each pixel is positive with probability `density`.
pub fn random_mask(size: usize, density: f64, seed: u64) -> PlumeMask {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let values = (0..size * size).map(|_| rng.gen::<f64>() < density).collect();
    PlumeMask::from_values(size, size, values).expect("square mask")
}
