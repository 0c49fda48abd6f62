//! Scalar abstraction: core math is generic over the float type.

use std::fmt::{Debug, Display};

/// Floating point scalar, f32 or f64.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + num_traits::NumAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn of_f64(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).expect("f64 conversion")
    }
    fn of_usize(v: usize) -> Self {
        <Self as num_traits::FromPrimitive>::from_usize(v).expect("usize conversion")
    }
    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("f64 conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
