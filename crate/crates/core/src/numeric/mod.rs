//! Dense tensors with reverse-mode automatic differentiation.

pub mod gradcheck;
mod kernels;
mod ops;
mod tape;
mod tensor;

pub use kernels::{dot, gelu};
pub(crate) use ops::mean_var;
pub use ops::{resize_series, select_scale, CrossEntropyTerm};
pub use tape::{BackwardArgs, BackwardFn, Tape, Var};
pub use tensor::Tensor;

/// Sinusoidal position table `[n_positions, d]`:
/// `pe[p, 2i] = sin(p / 10000^(2i/d))`, `pe[p, 2i+1] = cos(p / 10000^(2i/d))`.
pub fn sinusoidal_pe(n_positions: usize, d: usize) -> crate::Result<Tensor> {
    if d % 2 != 0 {
        return Err(crate::Error::Config(format!(
            "positional encoding width must be even, got {d}"
        )));
    }
    let mut data = vec![0.0f32; n_positions * d];
    for p in 0..n_positions {
        for i in 0..d / 2 {
            let angle = p as f64 / 10000f64.powf(2.0 * i as f64 / d as f64);
            data[p * d + 2 * i] = angle.sin() as f32;
            data[p * d + 2 * i + 1] = angle.cos() as f32;
        }
    }
    Tensor::new(vec![n_positions, d], data)
}
