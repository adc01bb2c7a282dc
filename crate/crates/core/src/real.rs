use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign};

/// Scalar type the numeric core is generic over: `f32` or `f64`.
pub trait Real:
    Float + FromPrimitive + NumAssign + Sum + ndarray::ScalarOperand + Debug + Display + Send + Sync + 'static
{
    /// Shorthand for lossy conversion of an `f64` constant.
    fn c(x: f64) -> Self {
        Self::from_f64(x).expect("constant must be representable")
    }

    fn from_usize_(n: usize) -> Self {
        Self::from_usize(n).expect("count must be representable")
    }
}

impl<T> Real for T where
    T: Float
        + FromPrimitive
        + NumAssign
        + Sum
        + ndarray::ScalarOperand
        + Debug
        + Display
        + Send
        + Sync
        + 'static
{
}
