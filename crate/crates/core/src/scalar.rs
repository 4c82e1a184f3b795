//! Storage scalar for tensors and kernels.
//!
//! Values are stored as `f32` or `f64`; every reduction widens to `f64`
//! before accumulating, so both storage types share one numeric contract.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    /// Bytes of one value in the native little-endian encoding.
    const BYTES: usize;

    fn as_f64(self) -> f64;

    /// Rounds to nearest for narrower types.
    fn from_f64_lossy(v: f64) -> Self;
}

impl Scalar for f32 {
    const BYTES: usize = 4;

    #[inline(always)]
    fn as_f64(self) -> f64 {
        self as f64
    }

    #[inline(always)]
    fn from_f64_lossy(v: f64) -> Self {
        v as f32
    }
}

impl Scalar for f64 {
    const BYTES: usize = 8;

    #[inline(always)]
    fn as_f64(self) -> f64 {
        self
    }

    #[inline(always)]
    fn from_f64_lossy(v: f64) -> Self {
        v
    }
}
