use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type of every tensor in the crate: `f32` for
/// training and serving, `f64` for gradient checks.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + LinalgScalar
    + ScalarOperand
    + Sum
    + Default
    + Send
    + Sync
    + Debug
    + Display
    + 'static
{
    /// Lossy conversion from `f64`; every value used in the crate is representable.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 converts to every Scalar")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }

    fn of_usize(v: usize) -> Self {
        Self::from_usize(v).expect("usize converts to every Scalar")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
