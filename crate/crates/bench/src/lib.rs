//! Shared fixtures for the benchmarks.

use tsdistill::model::ModelConfig;
use tsdistill::rng;
use tsdistill::Tensor;

/// Standard normal tensor drawn from a dedicated stream.
pub fn normal_tensor(shape: &[usize], seed: u64) -> Tensor {
    let mut r = rng::stream(seed, "bench:tensor", 0);
    Tensor::from_fn(shape.to_vec(), |_| rng::normal(&mut r) as f32)
}

/// Batch of smooth univariate series, `[batch, length]`.
pub fn series_batch(batch: usize, length: usize, seed: u64) -> Tensor {
    let noise = normal_tensor(&[batch, length], seed);
    Tensor::from_fn(vec![batch, length], |i| {
        let (b, t) = (i / length, i % length);
        let phase = t as f32 / length as f32 * std::f32::consts::TAU * (1 + b % 5) as f32;
        phase.sin() + 0.1 * noise.data()[i]
    })
}

/// Small encoder used for forward and training-step timings.
pub fn bench_model() -> ModelConfig {
    ModelConfig::tiny()
}
