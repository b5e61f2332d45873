//! Scalar abstraction for the numeric core.
//!
//! Everything numeric in this crate is generic over [`Scalar`], implemented
//! for `f32` and `f64`. The crate-root aliases pin `f64`, which is what the
//! training pipeline and the finite-difference gradchecks use.

use std::fmt::{Debug, Display};

use num_traits::{Float, NumAssignOps, NumCast};

/// Floating-point scalar usable as tensor element type.
pub trait Scalar: Float + NumAssignOps + Debug + Display + Default + Send + Sync + 'static {
    /// Conversion from `f64` for configuration constants.
    fn cast(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("f64 constant convertible to scalar")
    }

    fn cast_usize(v: usize) -> Self {
        <Self as NumCast>::from(v).expect("usize convertible to scalar")
    }

    /// Widen to `f64` for reporting and serialization.
    fn as_f64(self) -> f64;
}

impl Scalar for f32 {
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    fn as_f64(self) -> f64 {
        self
    }
}
