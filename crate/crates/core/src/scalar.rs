//! Scalar abstraction for the numeric core.
//!
//! All tensor and autodiff code is generic over [`Scalar`] so the same
//! kernels run at f32 or f64. The lab itself trains in f64 (see the
//! [`crate::Real`] alias): gradient checks against central differences at
//! `h = 1e-5` need the extra mantissa bits.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssignOps, NumCast, ToBytes};

/// Floating-point element type of tensors: `f32` or `f64`.
pub trait Scalar:
    Float + NumCast + NumAssignOps + ToBytes + Sum<Self> + Debug + Display + Send + Sync + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Casts an `f64` constant into the scalar type. Panics only if the target
/// type cannot represent any finite value, which cannot happen for floats.
#[inline]
pub(crate) fn lit<F: Scalar>(x: f64) -> F {
    F::from(x).expect("float literal always converts")
}
