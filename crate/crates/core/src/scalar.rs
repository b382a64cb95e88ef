use std::fmt::{Debug, Display};

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating-point scalar the estimator math is written against.
///
/// Implemented for `f32` and `f64`. The pipeline (tracking, mapping,
/// simulator) is instantiated with `f64`; the math layers stay generic so
/// they can be exercised in single precision as well.
pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + Default + Debug + Display + Send + Sync + 'static
{
    /// Converts an `f64` literal into this scalar type.
    #[inline]
    fn lit(v: f64) -> Self {
        nalgebra::convert(v)
    }

    /// Lossy conversion back to `f64`, for reporting.
    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Angle below which closed-form SO(3) expressions switch to Taylor series.
    #[inline]
    fn small_angle() -> Self {
        Self::lit(1e-5)
    }
}

impl Real for f32 {
    #[inline]
    fn small_angle() -> Self {
        1e-2
    }
}

impl Real for f64 {}
