//! Floating-point abstraction shared by the numeric modules.
//!
//! Every numeric routine in this crate is written against [`Scalar`] so the
//! same code runs in `f32` and `f64`. The simulator itself runs in `f64`
//! (see the aliases at the crate root).

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

pub trait Scalar:
    'static
    + Send
    + Sync
    + Float
    + NumAssign
    + FromPrimitive
    + ToPrimitive
    + Default
    + Sum
    + Debug
    + Display
    + LowerExp
{
    /// Converts an `f64` constant into this type.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 constant representable in scalar type")
    }

    #[inline]
    fn from_count(n: usize) -> Self {
        Self::from_usize(n).expect("count representable in scalar type")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
