//! Scalar abstraction for the numeric core.
//!
//! The LSTM, optimizer, and probe are generic over [`Scalar`] so the same
//! code runs in f32 or f64. The default pipeline instantiates f64: the
//! gradient-check tolerances and bitwise-determinism contracts assume
//! 64-bit precision.

use num_traits::Float;

pub trait Scalar:
    Float
    + num_traits::NumAssignOps
    + std::iter::Sum
    + std::fmt::Debug
    + std::fmt::Display
    + Send
    + Sync
    + 'static
{
    fn from_f64(x: f64) -> Self;
    fn into_f64(self) -> f64;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn into_f64(self) -> f64 {
        self as f64
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn into_f64(self) -> f64 {
        self
    }
}
