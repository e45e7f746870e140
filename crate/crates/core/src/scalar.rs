//! Scalar abstraction shared by the numerical modules.
//!
//! Everything below `experiments` is written against [`Real`], so the model,
//! integrator, meter and analysis code runs in either `f32` or `f64`. The
//! tolerances quoted throughout the crate assume `f64`.

use std::fmt::{Debug, Display, LowerExp};
use std::iter::Sum;

use num_complex::Complex;
use num_traits::{Float, FloatConst, FromPrimitive};
use rustfft::FftNum;

/// Real floating-point scalar: f32 or f64.
pub trait Real:
    Float + FloatConst + FromPrimitive + FftNum + Sum + Default + Display + LowerExp + Debug
{
    /// Convert an `f64` constant into this scalar type.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 constant representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize representable in scalar type")
    }
}

impl Real for f32 {}
impl Real for f64 {}

/// Complex number over the crate's scalar type.
pub type Cplx<T> = Complex<T>;

/// 2x2 complex matrix in the (|e>, |g>) basis, row-major.
pub type Matrix2<T> = [[Cplx<T>; 2]; 2];
