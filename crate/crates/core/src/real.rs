//! Scalar abstraction for the numeric core.
//!
//! Every numeric kernel in this crate is generic over [`Real`], so the same
//! code instantiates at `f32` or `f64`. The reference pipeline and the test
//! suite run in `f64`; grid file payloads are `f32` on disk regardless of the
//! in-memory scalar (see [`crate::io`]).

use num_traits::{FromPrimitive, ToPrimitive};

/// Scalar trait bundle: nalgebra's real-field operations plus the primitive
/// conversions needed for constants, file payloads and reporting.
pub trait Real:
    nalgebra::RealField + Copy + Default + FromPrimitive + ToPrimitive + Send + Sync
{
    /// Converts an `f64` constant into the working scalar (lossy for `f32`).
    #[inline]
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 constant")
    }

    /// Widens to `f64` (exact for both `f32` and `f64`).
    #[inline]
    fn to64(self) -> f64 {
        self.to_f64().expect("real scalar widens to f64")
    }
}

impl Real for f32 {}
impl Real for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conversions_round_trip() {
        assert_eq!(f64::of(0.25), 0.25);
        assert_eq!(f32::of(0.25), 0.25f32);
        assert_eq!(1.5f32.to64(), 1.5);
        assert_eq!((-3.0f64).to64(), -3.0);
    }
}
