//! Scalar abstraction: all numeric kernels are generic over `f32`/`f64`.
//!
//! Training and serving default to `f32`; the closed-form loss oracles and
//! finite-difference gradient checks run the same code paths in `f64`.

use ndarray::{LinalgScalar, ScalarOperand};
use num_traits::{Float, FromPrimitive, NumAssignOps, ToPrimitive};
use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Byte-level codec for checkpoint and index files (always little-endian).
pub trait PackedScalar: Sized {
    /// Dtype tag recorded in tensor-archive manifests.
    const DTYPE: &'static str;
    /// Number of bytes per element.
    const WIDTH: usize;
    fn write_le(&self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;
}

impl PackedScalar for f32 {
    const DTYPE: &'static str = "f32";
    const WIDTH: usize = 4;
    fn write_le(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes[..4].try_into().unwrap())
    }
}

impl PackedScalar for f64 {
    const DTYPE: &'static str = "f64";
    const WIDTH: usize = 8;
    fn write_le(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes[..8].try_into().unwrap())
    }
}

/// The scalar bound used throughout the crate.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + NumAssignOps
    + LinalgScalar
    + ScalarOperand
    + PackedScalar
    + Sum
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Lossless-enough conversion from an `f64` constant.
    fn from_f64c(v: f64) -> Self {
        Self::from_f64(v).expect("f64 constant representable")
    }
    /// Widen to `f64` for logging and metrics.
    fn to_f64c(self) -> f64 {
        self.to_f64().expect("scalar widens to f64")
    }
}

impl<T> Scalar for T where
    T: Float
        + FromPrimitive
        + ToPrimitive
        + NumAssignOps
        + LinalgScalar
        + ScalarOperand
        + PackedScalar
        + Sum
        + Debug
        + Display
        + Send
        + Sync
        + 'static
{
}
