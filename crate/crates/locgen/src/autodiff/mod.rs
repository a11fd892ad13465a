//! Minimal reverse-mode automatic differentiation.
//!
//! Design: an eager tape. Every op computes its value immediately and records
//! what it needs for the backward pass on a [`Tape`]; [`Tape::backward`]
//! walks the recorded nodes in reverse, accumulating gradients per node.
//! There is no graph optimization, fusion, or buffer reuse — at this model
//! scale, clarity wins.
//!
//! Everything is generic over [`Real`] so the same code runs in `f32` for
//! training and in `f64` for finite-difference gradient verification.

mod gemm;
mod gradcheck;
pub(crate) mod math;
mod ops;
mod tape;
mod tensor;

pub use gradcheck::grad_check;
pub use tape::{Gradients, Tape, Var};
pub use tensor::TensorData;

/// Floating-point element type for tensors: `f32` or `f64`.
pub trait Real:
    num_traits::Float
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::fmt::Debug
    + std::fmt::Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

impl Real for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        f64::from(self)
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}
