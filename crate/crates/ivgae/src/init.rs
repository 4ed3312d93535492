//! Seeded parameter initializers.

use rand_chacha::ChaCha8Rng;

use crate::rng::{normals, uniforms};
use crate::tensor::Tensor;

/// Xavier/Glorot uniform: U(−√(6/(fan_in+fan_out)), +√(6/(fan_in+fan_out))).
pub fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    let bound = (6.0 / (rows + cols) as f64).sqrt();
    Tensor::new(vec![rows, cols], uniforms(rng, rows * cols, -bound, bound))
        .expect("consistent shape")
}

/// Uniform in [−0.5, 0.5]; used for the category embedding tables.
pub fn uniform_half(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::new(vec![rows, cols], uniforms(rng, rows * cols, -0.5, 0.5))
        .expect("consistent shape")
}

/// Gaussian with the given standard deviation.
pub fn gaussian(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape, normals(rng, n, 0.0, std)).expect("consistent shape")
}
