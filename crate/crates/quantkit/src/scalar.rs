//! Scalar abstraction over the floating-point element type.
//!
//! All numeric kernels in this crate are generic over [`Scalar`] so the same
//! code runs in `f32` (the on-disk dtype) and `f64` (useful for tightening
//! numerical experiments). Loss accumulation is always done in `f64`
//! regardless of the tensor scalar type.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};

/// Floating-point element type accepted by tensors and kernels.
///
/// `Float::round` rounds half-way cases away from zero, which is the rounding
/// rule this crate relies on for reproducible quantization codes.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + Sum<Self>
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("f64 conversion")
    }

    fn from_f32_lossy(v: f32) -> Self {
        Self::from_f32(v).expect("f32 conversion")
    }

    fn from_usize_lossy(v: usize) -> Self {
        Self::from_usize(v).expect("usize conversion")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().expect("f64 conversion")
    }

    fn to_f32_lossy(self) -> f32 {
        self.to_f32().expect("f32 conversion")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
