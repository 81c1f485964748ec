//! Scalar abstraction over the two numeric precisions.
//!
//! Training runs in `f32` for speed; gradient verification runs in `f64`
//! because central finite differences need the extra mantissa bits.

use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar used throughout the differentiable stack.
pub trait Real:
    num_traits::Float + Debug + Display + Default + Send + Sync + Sum + 'static
{
    const PRECISION: Precision;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;

    fn from_usize(v: usize) -> Self {
        Self::from_f64(v as f64)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Precision {
    /// f32: the training path.
    Fast,
    /// f64: the verification path.
    High,
}

impl Real for f32 {
    const PRECISION: Precision = Precision::Fast;

    fn from_f64(v: f64) -> Self {
        v as f32
    }

    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const PRECISION: Precision = Precision::High;

    fn from_f64(v: f64) -> Self {
        v
    }

    fn as_f64(self) -> f64 {
        self
    }
}
