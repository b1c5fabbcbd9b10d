//! Dense tensors with reverse-mode automatic differentiation.
//!
//! Every forward operation is a pure function in [`ops`]. Two [`Graph`]
//! implementations drive them: [`Eager`] evaluates immediately and drops
//! intermediates as they go out of scope, [`Tape`] records each operation so
//! that [`Tape::backward`] can propagate gradients. Model code is written once
//! against the `Graph` trait and runs under either.

mod adam;
pub mod gradcheck;
mod graph;
pub mod kernels;
pub mod ops;
mod tape;
mod tensor;

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;
use realfft::FftNum;

pub use adam::{AdamConfig, AdamState};
pub use graph::{CustomOp, Eager, Graph};
pub use tape::{Tape, Var};
pub use tensor::Tensor;

/// Floating-point element type: `f32` for training and inference, `f64` for
/// gradient checking.
pub trait Scalar:
    Float + FftNum + Default + Sum + Debug + Display + Send + Sync + 'static
{
    fn lit(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn lit(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn lit(v: f64) -> Self {
        v
    }
    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}
