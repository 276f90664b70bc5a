//! Scalar abstraction over the tensor element type.
//!
//! All math in this crate is generic over [`Scalar`], implemented for `f32`
//! and `f64`. Training runs on `f32` for throughput; gradient checks and the
//! numeric oracles run on `f64`. Reduction-style operations (sums, means,
//! normalization statistics, losses) accumulate in `f64` regardless of the
//! storage type.

use std::fmt::{Debug, Display};

use num_traits::Float;

pub trait Scalar:
    Float + num_traits::NumAssign + Copy + Send + Sync + Debug + Display + 'static
{
    const NAME: &'static str;

    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
    fn from_f32(v: f32) -> Self;
    fn as_f32(self) -> f32;
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }
    #[inline(always)]
    fn from_f32(v: f32) -> Self {
        v
    }
    #[inline(always)]
    fn as_f32(self) -> f32 {
        self
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    #[inline(always)]
    fn from_f64(v: f64) -> Self {
        v
    }
    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }
    #[inline(always)]
    fn from_f32(v: f32) -> Self {
        v as f64
    }
    #[inline(always)]
    fn as_f32(self) -> f32 {
        self as f32
    }
}
