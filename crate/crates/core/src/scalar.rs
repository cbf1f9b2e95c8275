//! Scalar abstractions.
//!
//! Metrics are generic over [`Scalar`] so the same code runs in `f32`, `f64`
//! or exact rational arithmetic. Embedding math is generic over [`Real`],
//! which additionally needs a square root.

use std::fmt::Debug;

use num_rational::Ratio;
use num_traits::{Float, Num, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Exact rational scalar used by the metric oracles.
pub type Rational = Ratio<i64>;

/// A field-like number usable for averaging counts.
pub trait Scalar: Num + Copy + PartialOrd + Debug + Send + Sync + 'static {
    fn from_count(n: usize) -> Self;

    fn from_int(n: i64) -> Self;

    fn to_f64(self) -> f64;
}

macro_rules! impl_float_scalar {
    ($($t:ty),*) => {$(
        impl Scalar for $t {
            #[inline]
            fn from_count(n: usize) -> Self {
                n as $t
            }

            #[inline]
            fn from_int(n: i64) -> Self {
                n as $t
            }

            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
        }
    )*};
}

impl_float_scalar!(f32, f64);

impl Scalar for Rational {
    fn from_count(n: usize) -> Self {
        Ratio::from_integer(i64::try_from(n).expect("count fits in i64"))
    }

    fn from_int(n: i64) -> Self {
        Ratio::from_integer(n)
    }

    fn to_f64(self) -> f64 {
        ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

/// Floating point scalar: f32 or f64.
pub trait Real: Float + Scalar + Default + Serialize + DeserializeOwned {}

impl Real for f32 {}
impl Real for f64 {}
