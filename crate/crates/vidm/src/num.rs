//! Scalar abstraction so the numerical core can run in f32 for training and
//! f64 for gradient-oracle tests.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use ndarray::{LinalgScalar, ScalarOperand};

/// Floating-point element type for tensors and schedules.
pub trait Real:
    num_traits_like::FloatOps
    + LinalgScalar
    + ScalarOperand
    + PartialOrd
    + Display
    + Debug
    + Sum
    + Send
    + Sync
    + 'static
{
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// Minimal float operations used by the core, implemented for f32/f64
/// without pulling in an external numerics trait crate.
pub mod num_traits_like {
    pub trait FloatOps: Copy + PartialEq {
        fn sqrt(self) -> Self;
        fn abs(self) -> Self;
        fn exp(self) -> Self;
        fn ln(self) -> Self;
        fn sin(self) -> Self;
        fn cos(self) -> Self;
        fn powi(self, n: i32) -> Self;
        fn max_val(self, other: Self) -> Self;
        fn min_val(self, other: Self) -> Self;
        fn is_finite_val(self) -> bool;
        fn recip_val(self) -> Self;
    }

    macro_rules! impl_float_ops {
        ($t:ty) => {
            impl FloatOps for $t {
                #[inline]
                fn sqrt(self) -> Self {
                    <$t>::sqrt(self)
                }
                #[inline]
                fn abs(self) -> Self {
                    <$t>::abs(self)
                }
                #[inline]
                fn exp(self) -> Self {
                    <$t>::exp(self)
                }
                #[inline]
                fn ln(self) -> Self {
                    <$t>::ln(self)
                }
                #[inline]
                fn sin(self) -> Self {
                    <$t>::sin(self)
                }
                #[inline]
                fn cos(self) -> Self {
                    <$t>::cos(self)
                }
                #[inline]
                fn powi(self, n: i32) -> Self {
                    <$t>::powi(self, n)
                }
                #[inline]
                fn max_val(self, other: Self) -> Self {
                    <$t>::max(self, other)
                }
                #[inline]
                fn min_val(self, other: Self) -> Self {
                    <$t>::min(self, other)
                }
                #[inline]
                fn is_finite_val(self) -> bool {
                    <$t>::is_finite(self)
                }
                #[inline]
                fn recip_val(self) -> Self {
                    <$t>::recip(self)
                }
            }
        };
    }

    impl_float_ops!(f32);
    impl_float_ops!(f64);
}
