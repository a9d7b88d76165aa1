//! Scalar abstraction for the numeric core.
//!
//! All curve, estimation and plan arithmetic is generic over [`Scalar`] so the
//! same code runs at `f32` or `f64`. The crate root exposes `f64` aliases,
//! which the I/O, simulator and CLI layers use exclusively.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating-point scalar: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Shorthand for lifting an `f64` literal into the working scalar type.
#[inline]
pub fn fl<F: Scalar>(x: f64) -> F {
    F::from_f64(x).expect("literal not representable")
}

/// Positive remainder of `a mod m`, in `[0, m)`.
#[inline]
pub fn rem_euclid<F: Scalar>(a: F, m: F) -> F {
    let r = a - (a / m).floor() * m;
    // floor() can land on m when a/m is just below an integer
    if r >= m {
        r - m
    } else {
        r
    }
}
