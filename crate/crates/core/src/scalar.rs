use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, NumAssign, NumCast};

/// Element type for tensors and parameters.
///
/// The whole stack is generic over `Scalar` so the same model code runs in
/// f32 for training throughput and in f64 for finite-difference gradient
/// checks, where 32-bit rounding would swamp the comparison.
pub trait Scalar:
    Float + NumAssign + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Width in bits; tolerance selection keys off this.
    const BITS: u32;

    /// Gauss error function; the exact-erf GELU needs it.
    fn erf(self) -> Self;

    #[inline]
    fn from_f64(v: f64) -> Self {
        <Self as NumCast>::from(v).expect("f64 converts to any Scalar")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("any Scalar converts to f64")
    }

    #[inline]
    fn from_f32(v: f32) -> Self {
        <Self as NumCast>::from(v).expect("f32 converts to any Scalar")
    }

    /// Lossy for f64 inputs; checkpoints store 32-bit values.
    #[inline]
    fn as_f32(self) -> f32 {
        self.to_f32().expect("any Scalar converts to f32")
    }
}

impl Scalar for f32 {
    const BITS: u32 = 32;

    #[inline]
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Scalar for f64 {
    const BITS: u32 = 64;

    #[inline]
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn erf_reference_points() {
        assert_eq!(Scalar::erf(0.0f64), 0.0);
        assert!((Scalar::erf(1.0f64) - 0.842_700_792_949_714_9).abs() < 1e-15);
        assert_eq!(Scalar::erf(f64::INFINITY), 1.0);
        assert!((Scalar::erf(1.0f32) - 0.842_700_8).abs() < 1e-6);
    }

    #[test]
    fn conversions_round_trip() {
        let x = 0.125f32;
        assert_eq!(f64::from_f32(x) as f32, x);
        assert_eq!(f32::from_f64(0.25), 0.25f32);
    }
}
