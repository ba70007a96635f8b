//! Floating-point scalar abstraction shared by every numeric module.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, NumCast};

/// Real scalar usable by the linear algebra, model and runtime code: `f32` or `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + NumCast
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    /// Storage width in bytes.
    const BYTES: usize;

    /// Relative off-diagonal tolerance used by the Jacobi sweeps.
    fn jacobi_tol() -> Self;

    /// Converts an `f64` literal; always representable (possibly rounded).
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("f64 literal representable in scalar type")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f64 {
    const BYTES: usize = 8;
    fn jacobi_tol() -> Self {
        1e-12
    }
}

impl Scalar for f32 {
    const BYTES: usize = 4;
    fn jacobi_tol() -> Self {
        // 1e-12 is below f32 resolution; sweeps would never terminate.
        8.0 * f32::EPSILON
    }
}
