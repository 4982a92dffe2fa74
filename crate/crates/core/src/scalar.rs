use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Scalar field used throughout the crate.
pub trait Real:
    RealField
    + Copy
    + FromPrimitive
    + ToPrimitive
    + Serialize
    + DeserializeOwned
    + Send
    + Sync
    + 'static
{
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable in the scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }

    /// Smallest positive normal value shared by both scalar types.
    fn tiny() -> Self {
        Self::lit(f32::MIN_POSITIVE as f64)
    }

    /// Absolute tolerance `abs`, widened for low-precision scalars.
    fn tol(abs: f64) -> Self {
        let floor = 1e3 * Self::default_epsilon().as_f64();
        Self::lit(abs.max(floor))
    }
}

impl Real for f32 {}
impl Real for f64 {}

pub(crate) fn clip<T: Real>(x: T, hi: T) -> T {
    x.max(T::zero()).min(hi)
}

/// Strictly positive and finite; false for NaN.
pub(crate) fn positive<T: Real>(x: T) -> bool {
    x > T::zero() && x.is_finite()
}
