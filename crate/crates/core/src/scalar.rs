//! Scalar abstraction for the numeric core.
//!
//! Everything numerical (tensors, the tape, losses, statistics) is generic
//! over [`Real`] so the same kernels run at f32 or f64. Training paths are
//! instantiated at f64 via the aliases at the crate root; the gradient
//! tolerances in the test suite assume 64-bit arithmetic.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point scalar usable in tensors and on the gradient tape.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + NumAssignOps + Sum + Debug + Display + Default + Send + Sync + 'static
{
}

impl Real for f32 {}
impl Real for f64 {}

/// Shorthand for lifting an f64 constant into the working scalar type.
#[inline]
pub fn cast<T: Real>(x: f64) -> T {
    T::from_f64(x).expect("f64 constant representable in scalar type")
}

/// Lossless-enough round trip back to f64 for logging and comparisons.
#[inline]
pub fn to_f64<T: Real>(x: T) -> f64 {
    x.to_f64().expect("scalar convertible to f64")
}
