//! Weight initialization: Glorot-uniform matrices, zeros for biases, ones
//! for layer-norm gains.

use rand::Rng;

use crate::matrix::Matrix;

/// Uniform in ±sqrt(6/(fan_in+fan_out)).
pub fn glorot(fan_in: usize, fan_out: usize, rng: &mut impl Rng) -> Matrix {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let mut m = Matrix::zeros(fan_in, fan_out);
    for x in m.data_mut() {
        *x = rng.gen_range(-bound..=bound);
    }
    m
}

/// Per-class Gaussian feature row: scaled standard-basis mean plus noise.
pub fn class_feature_row(
    class: usize,
    dim: usize,
    noise: f64,
    rng: &mut impl Rng,
) -> Vec<f64> {
    use rand_distr::{Distribution, StandardNormal};
    let axis = class % dim;
    // wrapped classes get a larger magnitude so means stay separated
    let scale = 1.0 + (class / dim) as f64;
    (0..dim)
        .map(|j| {
            let mean = if j == axis { scale } else { 0.0 };
            let n: f64 = StandardNormal.sample(rng);
            mean + noise * n
        })
        .collect()
}
