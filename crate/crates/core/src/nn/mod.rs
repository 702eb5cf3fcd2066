//! Dense tensors, a reverse-mode autodiff tape, Adam, and the checkpoint
//! format. Everything is CPU, row-major, and deterministic: identical inputs
//! and parameters give bitwise identical results.
//!
//! Float width is generic: training runs in `f32`, gradient checking in
//! `f64` (see [`grad_check`]).

mod adam;
mod checkpoint;
mod gradcheck;
mod ops;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState, LrSchedule};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, CheckpointError, CheckpointManifest, TensorMeta,
};
pub use gradcheck::grad_check;
pub use ops::{layer_norm, scaled_dot_attention, softmax_rows};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum NnError {
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("NaN in input")]
    NaNInput,
    #[error("invalid shape: {0}")]
    InvalidShape(String),
}

/// Element type for tensors: `f32` in training, `f64` in gradient-check mode.
pub trait Real:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f32_lossy(x: f32) -> Self;
    fn to_f32_lossy(self) -> f32;
}

impl Real for f32 {
    fn from_f32_lossy(x: f32) -> Self {
        x
    }
    fn to_f32_lossy(self) -> f32 {
        self
    }
}

impl Real for f64 {
    fn from_f32_lossy(x: f32) -> Self {
        x as f64
    }
    fn to_f32_lossy(self) -> f32 {
        self as f32
    }
}

/// Shorthand for converting literal constants into the active float width.
#[inline]
pub fn fl<F: Real>(x: f64) -> F {
    F::from_f64(x).expect("finite constant")
}
