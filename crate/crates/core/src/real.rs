//! Scalar abstraction over the two supported precisions.
//!
//! Everything numeric is generic over [`Real`]; tests and gradient checks run
//! at `f64` (finite differences are meaningless at `f32`), end-to-end runs may
//! pick `f32` for speed.

use num_traits::Float;

/// Floating-point scalar usable by the engine. Implemented for `f32`/`f64`.
pub trait Real:
    Float + core::fmt::Debug + core::fmt::Display + Default + Send + Sync + 'static
{
    /// Short name recorded in manifests ("f32"/"f64").
    const NAME: &'static str;

    /// Lossy conversion from `f64` (named to avoid clashing with the
    /// `FromPrimitive`/`ToPrimitive` methods `Float` pulls in).
    fn of_f64(x: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f64 {
    const NAME: &'static str = "f64";

    #[inline]
    fn of_f64(x: f64) -> Self {
        x
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self
    }
}

impl Real for f32 {
    const NAME: &'static str = "f32";

    #[inline]
    fn of_f64(x: f64) -> Self {
        x as f32
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self as f64
    }
}

/// Shorthand for lifting an `f64` literal into the working precision.
#[inline]
pub fn real<T: Real>(x: f64) -> T {
    T::of_f64(x)
}
