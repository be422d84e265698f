//! Scalar abstraction shared by every solver in the crate.

use nalgebra as na;
use num_traits as nt;

/// Real floating point type the solvers are generic over (`f32`, `f64`).
pub trait Real: na::RealField + Copy + nt::FromPrimitive + nt::ToPrimitive + Send + Sync + 'static {
    /// Machine epsilon.
    const EPSILON: Self;

    /// Converts an `f64` literal. Never fails for the supported types.
    fn lit(v: f64) -> Self {
        <Self as nt::FromPrimitive>::from_f64(v).expect("f64 literal representable")
    }

    /// A default tolerance: `v`, floored at a small multiple of machine epsilon so
    /// that `f64`-tuned defaults stay meaningful for `f32`.
    fn tol(v: f64) -> Self {
        let floor = Self::EPSILON * Self::lit(64.0);
        let v = Self::lit(v);
        if v > floor {
            v
        } else {
            floor
        }
    }

    fn as_f64(self) -> f64 {
        nt::ToPrimitive::to_f64(&self).unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    const EPSILON: Self = f32::EPSILON;
}

impl Real for f64 {
    const EPSILON: Self = f64::EPSILON;
}
