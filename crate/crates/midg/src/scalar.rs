//! Floating-point scalar abstraction: the whole stack is generic over `f32`
//! (training default) and `f64` (gradient-checking mode).

use std::fmt::{Debug, Display};
use std::str::FromStr;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Scalar type the tensors, models and losses are generic over.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + FromStr
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Converts from `f64`, rounding when the target is narrower.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 converts to any Scalar")
    }

    /// Widens to `f64`.
    fn to64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
