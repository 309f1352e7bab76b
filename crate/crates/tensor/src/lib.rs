//! Tape-based reverse-mode automatic differentiation over `ndarray`.
//!
//! The tape records eagerly-evaluated ops on dynamic-rank arrays. Backward
//! passes emit gradients *as new tape nodes*, so a gradient can itself be
//! differentiated — the property the gradient-matching losses in this
//! workspace rely on (losses defined over `dL/dparams` that must be
//! backpropagated to pixels).
//!
//! Everything is generic over [`Scalar`] so production runs in `f32` while
//! finite-difference checks run in `f64`.

pub mod compose;
pub mod kernels;
pub mod tape;

pub use tape::{Grads, NodeId, Tape};

use ndarray::ScalarOperand;
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Element type the tape operates on. Implemented for `f32` and `f64`.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + ndarray::LinalgScalar
    + ScalarOperand
    + Sum
    + Send
    + Sync
    + Debug
    + Display
    + Default
    + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for converting an `f64` literal into the active scalar type.
pub fn lit<T: Scalar>(x: f64) -> T {
    T::from_f64(x).expect("f64 literal representable in scalar type")
}
