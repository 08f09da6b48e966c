//! Scalar abstraction for tensor element types.

use std::fmt;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point element type a tensor can hold (`f32` or `f64`).
///
/// All merge arithmetic accumulates in `f64` regardless of the element type;
/// `acc` and `from_acc` are the widening and narrowing conversions used at
/// that boundary. The container format itself is fixed to `f32`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Copy + Send + Sync + fmt::Debug + fmt::Display + 'static
{
    /// Widen into the `f64` accumulator domain.
    fn acc(self) -> f64 {
        self.to_f64().expect("scalar widens to f64")
    }

    /// Narrow from the `f64` accumulator domain.
    fn from_acc(value: f64) -> Self {
        Self::from_f64(value).expect("scalar narrows from f64")
    }
}

impl<T> Scalar for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + Copy
        + Send
        + Sync
        + fmt::Debug
        + fmt::Display
        + 'static
{
}
