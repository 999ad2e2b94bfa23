//! Scalar abstraction so the same tensor and model code runs in f32 for
//! training and f64 for gradient checks.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{Add, AddAssign, Div, Mul, Neg, Sub, SubAssign};

use super::tape::{self, Tape};

/// Element type of a [`super::Tensor`].
///
/// Implemented for `f32` and `f64` only. Each implementation routes tape
/// recording to its own thread-local tape so the two precisions can coexist
/// in one process.
pub trait Scalar:
    Copy
    + PartialOrd
    + Debug
    + Display
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + Sum
{
    const ZERO: Self;
    const ONE: Self;
    /// Serialized width in bytes (little-endian IEEE 754).
    const BYTES: usize;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;

    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn powf(self, e: Self) -> Self;
    fn abs(self) -> Self;
    fn max_v(self, other: Self) -> Self;
    fn min_v(self, other: Self) -> Self;
    fn is_finite(self) -> bool;

    /// Appends the little-endian encoding of `self` to `out`.
    fn write_le(self, out: &mut Vec<u8>);
    /// Decodes from exactly [`Self::BYTES`] little-endian bytes.
    fn read_le(bytes: &[u8]) -> Self;

    #[doc(hidden)]
    fn with_tape<R>(f: impl FnOnce(&mut Tape) -> R) -> R;
}

impl Scalar for f32 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const BYTES: usize = 4;

    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }

    fn exp(self) -> Self {
        self.exp()
    }
    fn ln(self) -> Self {
        self.ln()
    }
    fn sqrt(self) -> Self {
        self.sqrt()
    }
    fn powf(self, e: Self) -> Self {
        self.powf(e)
    }
    fn abs(self) -> Self {
        self.abs()
    }
    fn max_v(self, other: Self) -> Self {
        self.max(other)
    }
    fn min_v(self, other: Self) -> Self {
        self.min(other)
    }
    fn is_finite(self) -> bool {
        self.is_finite()
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f32::from_le_bytes(bytes.try_into().expect("f32 needs 4 bytes"))
    }

    fn with_tape<R>(f: impl FnOnce(&mut Tape) -> R) -> R {
        tape::with_tape_f32(f)
    }
}

impl Scalar for f64 {
    const ZERO: Self = 0.0;
    const ONE: Self = 1.0;
    const BYTES: usize = 8;

    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }

    fn exp(self) -> Self {
        self.exp()
    }
    fn ln(self) -> Self {
        self.ln()
    }
    fn sqrt(self) -> Self {
        self.sqrt()
    }
    fn powf(self, e: Self) -> Self {
        self.powf(e)
    }
    fn abs(self) -> Self {
        self.abs()
    }
    fn max_v(self, other: Self) -> Self {
        self.max(other)
    }
    fn min_v(self, other: Self) -> Self {
        self.min(other)
    }
    fn is_finite(self) -> bool {
        self.is_finite()
    }

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }
    fn read_le(bytes: &[u8]) -> Self {
        f64::from_le_bytes(bytes.try_into().expect("f64 needs 8 bytes"))
    }

    fn with_tape<R>(f: impl FnOnce(&mut Tape) -> R) -> R {
        tape::with_tape_f64(f)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn roundtrip_le_f32() {
        let mut buf = Vec::new();
        for v in [0.0f32, -1.5, 3.25e7, f32::MIN_POSITIVE] {
            buf.clear();
            v.write_le(&mut buf);
            assert_eq!(buf.len(), f32::BYTES);
            assert_eq!(f32::read_le(&buf), v);
        }
    }

    #[test]
    fn roundtrip_le_f64() {
        let mut buf = Vec::new();
        for v in [0.0f64, -1.5, 1.0 / 3.0, f64::MAX] {
            buf.clear();
            v.write_le(&mut buf);
            assert_eq!(buf.len(), f64::BYTES);
            assert_eq!(f64::read_le(&buf), v);
        }
    }

    #[test]
    fn conversions() {
        assert_eq!(f32::from_f64(0.5), 0.5f32);
        assert_eq!(0.5f32.to_f64(), 0.5f64);
        assert_eq!(<f32 as Scalar>::ZERO + <f32 as Scalar>::ONE, 1.0);
    }
}
