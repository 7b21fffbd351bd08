//! Scalar abstraction shared by every numeric routine in the crate.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating-point scalar the library computes with.
///
/// Implemented for `f32` and `f64`. Estimators, variance formulas, regression
/// and the simulation engine are all generic over this trait; the crate root
/// exports `f64` aliases for the common concrete types.
pub trait Scalar: RealField + Copy + Default + FromPrimitive + ToPrimitive {}

impl<T> Scalar for T where T: RealField + Copy + Default + FromPrimitive + ToPrimitive {}

/// Lifts an `f64` constant into the scalar type.
#[inline]
pub(crate) fn real<F: Scalar>(x: f64) -> F {
    F::from_f64(x).expect("finite f64 constant")
}

/// Lifts a count into the scalar type.
#[inline]
pub(crate) fn count<F: Scalar>(n: usize) -> F {
    F::from_usize(n).expect("count representable in scalar type")
}
