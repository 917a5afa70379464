//! Floating-point abstraction used by every solver in this crate.
//!
//! All numeric code is generic over [`Real`], which bundles the nalgebra
//! field operations with the conversion traits the solvers need. `f64` is
//! the intended precision for production use; `f32` works but the default
//! tolerances are floored at a multiple of the machine epsilon, so expect
//! correspondingly looser results.

use num_traits::{FromPrimitive, ToPrimitive};

/// Scalar type accepted by the solvers.
pub trait Real:
    nalgebra::RealField
    + Copy
    + FromPrimitive
    + ToPrimitive
    + std::iter::Sum<Self>
    + for<'a> std::iter::Sum<&'a Self>
{
    /// Positive infinity, used for absent budgets.
    fn infinity() -> Self;

    /// Quiet NaN, used as a sentinel in failed diagnostics.
    fn nan() -> Self;

    /// Machine epsilon of the concrete type.
    fn eps() -> Self;

    /// Converts an `f64` constant into this type.
    fn of(x: f64) -> Self {
        Self::from_f64(x).expect("constant not representable in scalar type")
    }

    /// A tolerance constant, floored so it stays meaningful at low precision.
    ///
    /// For `f64` this returns `x` unchanged (all defaults in this crate are
    /// well above `f64` epsilon); for `f32` tolerances tighter than
    /// `64 * EPSILON` are clamped up to that floor.
    fn tol(x: f64) -> Self {
        <Self as Real>::of(x).max(Self::eps() * <Self as Real>::of(64.0))
    }

    /// Lossy view as `f64`, mainly for error payloads and display.
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// True when the value is NaN (the only value unequal to itself).
    #[allow(clippy::eq_op)]
    fn is_nan(self) -> bool {
        self != self
    }

    /// True when the value is neither NaN nor infinite.
    fn finite(self) -> bool {
        !self.is_nan() && self.abs() < <Self as Real>::infinity()
    }
}

impl Real for f64 {
    fn infinity() -> Self {
        f64::INFINITY
    }
    fn nan() -> Self {
        f64::NAN
    }
    fn eps() -> Self {
        f64::EPSILON
    }
}

impl Real for f32 {
    fn infinity() -> Self {
        f32::INFINITY
    }
    fn nan() -> Self {
        f32::NAN
    }
    fn eps() -> Self {
        f32::EPSILON
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn conversion_round_trips() {
        assert_eq!(<f64 as Real>::of(2.5), 2.5);
        assert_eq!(<f32 as Real>::of(2.5), 2.5f32);
        assert_eq!(2.5f64.as_f64(), 2.5);
    }

    #[test]
    fn tolerance_floor_kicks_in_for_f32() {
        let t32 = <f32 as Real>::tol(1e-12);
        assert!(t32 >= 64.0 * f32::EPSILON);
        let t64 = <f64 as Real>::tol(1e-12);
        assert_eq!(t64, 1e-12);
    }
}
