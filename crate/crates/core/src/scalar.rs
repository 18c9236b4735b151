use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;
use std::str::FromStr;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point type the loss, model and training code is written against.
///
/// Implemented for `f32` and `f64`. Everything on the loss path is exercised
/// in `f64` by the test-suite; `f32` is supported but overflows earlier
/// (`e^88`), so large scale factors should stay in double precision.
pub trait Scalar:
    'static
    + Copy
    + Send
    + Sync
    + Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + LowerExp
    + FromStr
{
    /// Converts an `f64` literal. Panics only if the literal is not
    /// representable, which never happens for `f32`/`f64`.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in scalar type")
    }

    #[inline]
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar convertible to f64")
    }

    /// Allowed deviation of a row norm from one before a row counts as
    /// non-unit: `1e-9`, widened to `64·ε` for low-precision types.
    #[inline]
    fn unit_tolerance() -> Self {
        Self::lit(1e-9).max(Self::epsilon() * Self::lit(64.0))
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
