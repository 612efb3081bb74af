//! Scalar abstraction over the two supported precisions.
//!
//! Training runs in f32; gradient checking runs in f64 because central
//! finite differences are unreliable at 32 bits.

use std::fmt::{Debug, Display};

/// Floating-point scalar the numeric core is generic over: f32 or f64.
pub trait Scalar:
    num_traits::Float
    + num_traits::FromPrimitive
    + num_traits::ToPrimitive
    + num_traits::NumAssignOps
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Error function, used by the exact normal-CDF gelu.
    fn erf(self) -> Self;

    /// Conversion from an f64 constant.
    fn real(v: f64) -> Self {
        num_traits::FromPrimitive::from_f64(v).expect("finite f64 converts to scalar")
    }

    fn as_f64(self) -> f64 {
        num_traits::ToPrimitive::to_f64(&self).expect("scalar converts to f64")
    }

    fn as_f32(self) -> f32 {
        self.as_f64() as f32
    }
}

impl Scalar for f32 {
    fn erf(self) -> Self {
        libm::erff(self)
    }
}

impl Scalar for f64 {
    fn erf(self) -> Self {
        libm::erf(self)
    }
}

/// Standard normal CDF Φ(x) = (1 + erf(x/√2)) / 2.
pub fn normal_cdf<F: Scalar>(x: F) -> F {
    let half = F::real(0.5);
    let inv_sqrt2 = F::real(std::f64::consts::FRAC_1_SQRT_2);
    half * (F::one() + (x * inv_sqrt2).erf())
}

/// Standard normal density φ(x) = exp(-x²/2) / √(2π).
pub fn normal_pdf<F: Scalar>(x: F) -> F {
    let half = F::real(0.5);
    let inv_sqrt_2pi = F::real(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    (-(x * x) * half).exp() * inv_sqrt_2pi
}
