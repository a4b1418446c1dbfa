//! Self-distillation pretraining for time-series transformer encoders.

pub mod augment;
pub mod config;
pub mod error;
pub mod evaluate;
pub mod losses;
pub mod model;
pub mod numeric;
pub mod rng;
pub mod synth;
pub mod trainer;

pub use error::{Error, Result};
pub use numeric::{Tape, Tensor, Var};
