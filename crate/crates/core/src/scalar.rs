use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign};

/// Floating-point element type used throughout the solvers.
///
/// Everything numeric in this crate is written against this trait so the
/// same code runs in `f64` (the default) or `f32` (half the memory traffic
/// for the large n×n score matrices).
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + NumAssign
    + Sum
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Converts an `f64` literal. Every finite `f64` is representable
    /// (possibly rounded) in the implementing types.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal is representable")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::lit(n as f64)
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
