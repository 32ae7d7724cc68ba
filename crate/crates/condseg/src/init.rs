//! Weight initialization.
//!
//! Kaiming-uniform for ReLU-followed layers, Xavier-uniform for layers
//! feeding a sigmoid or the output head, zero biases everywhere. All
//! draws come from a caller-provided ChaCha stream so construction is
//! deterministic given the seed.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::scalar::Scalar;
use crate::tensor::Tensor;

fn uniform<S: Scalar>(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor<S> {
    let numel: usize = shape.iter().product();
    let data = (0..numel)
        .map(|_| S::from_f64(rng.gen_range(-bound..bound)))
        .collect();
    Tensor::from_vec(shape.to_vec(), data)
}

/// Kaiming-uniform: `U(+-sqrt(6 / fan_in))`, the ReLU-gain variant.
pub fn kaiming_uniform<S: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    fan_in: usize,
) -> Tensor<S> {
    uniform(rng, shape, (6.0 / fan_in as f64).sqrt())
}

/// Xavier-uniform: `U(+-sqrt(6 / (fan_in + fan_out)))`.
pub fn xavier_uniform<S: Scalar>(
    rng: &mut ChaCha8Rng,
    shape: &[usize],
    fan_in: usize,
    fan_out: usize,
) -> Tensor<S> {
    uniform(rng, shape, (6.0 / (fan_in + fan_out) as f64).sqrt())
}
