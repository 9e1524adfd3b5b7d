//! Floating-point abstraction so the same kernels run in `f32` (training
//! speed) and `f64` (finite-difference gradient verification).

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

/// Element type for feature maps, parameters, and gradients.
///
/// `NdFloat` brings the ndarray operator traits; the extra methods cover
/// seeded sampling and lossless round-trips through `f64` used by the
/// schedulers and evaluators (which always run in `f64`).
pub trait Scalar:
    ndarray::NdFloat + std::iter::Sum + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn into_f64(self) -> f64;
    /// One draw from N(0, 1).
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self;
    /// One draw from U[lo, hi).
    fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: Self, hi: Self) -> Self;
}

impl Scalar for f32 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn into_f64(self) -> f64 {
        self as f64
    }
    #[inline]
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
    #[inline]
    fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: Self, hi: Self) -> Self {
        if lo >= hi {
            return lo;
        }
        rng.random_range(lo..hi)
    }
}

impl Scalar for f64 {
    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn into_f64(self) -> f64 {
        self
    }
    #[inline]
    fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> Self {
        StandardNormal.sample(rng)
    }
    #[inline]
    fn uniform<R: Rng + ?Sized>(rng: &mut R, lo: Self, hi: Self) -> Self {
        if lo >= hi {
            return lo;
        }
        rng.random_range(lo..hi)
    }
}
