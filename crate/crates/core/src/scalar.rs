//! Scalar abstraction: every numeric kernel is generic over `Scalar`,
//! instantiated as `f32` or `f64`. The crate root exports `f64` aliases,
//! which the CLI and all experiments use.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssignOps, ToPrimitive};

pub trait Scalar:
    Float + FloatConst + FromPrimitive + ToPrimitive + NumAssignOps + Sum<Self> + Debug + Display + Send + Sync + 'static
{
    /// Lift an `f64` literal into the scalar type.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("literal must be representable")
    }

    /// Lossy view as `f64` (exact for `f64`, widened for `f32`).
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar must convert to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
