//! Scalar abstraction for the numerical core.
//!
//! Everything numeric in this crate is generic over [`Real`], a floating-point
//! scalar backed by `num-traits`. The crate root exposes f64 aliases for the
//! concrete types; f64 is the precision the solvers and quantile routines are
//! tuned for.

use std::fmt::{Debug, Display, LowerExp};
use std::str::FromStr;

/// Floating-point scalar: f32 or f64.
pub trait Real:
    num_traits::Float
    + num_traits::FloatConst
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + Debug
    + Display
    + LowerExp
    + FromStr
    + Default
    + serde::Serialize
    + serde::de::DeserializeOwned
    + Send
    + Sync
    + 'static
{
    /// Lift an f64 literal into this scalar type.
    #[inline]
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable in Real")
    }

    /// Lower into f64 (lossless for f64, widening for f32).
    #[inline]
    fn f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("Real representable as f64")
    }

    /// Lift a usize count (sample sizes, dimensions).
    #[inline]
    fn of_usize(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable in Real")
    }
}

impl Real for f32 {}
impl Real for f64 {}
