//! Scalar abstraction shared by every numerical module.

use nalgebra::RealField;
use num_traits::{FromPrimitive, ToPrimitive};

/// Real scalar the numerical core is generic over (`f32` or `f64`).
///
/// `num_traits::Float` is left out of the bounds: its methods overlap with
/// `RealField` and make calls ambiguous.
pub trait Real:
    RealField + Copy + FromPrimitive + ToPrimitive + std::iter::Sum + Send + Sync + 'static
{
    /// Converts an `f64` literal or intermediate into this scalar.
    #[inline]
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable in every Real scalar")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Machine epsilon of the concrete type.
    fn machine_eps() -> Self;
}

impl Real for f64 {
    fn machine_eps() -> Self {
        f64::EPSILON
    }
}

impl Real for f32 {
    fn machine_eps() -> Self {
        f32::EPSILON
    }
}

/// `log(sum(exp(values)))` computed without overflow. Returns `-inf` for an
/// empty slice or when every entry is `-inf`.
pub fn log_sum_exp<T: Real>(values: &[T]) -> T {
    let max = values
        .iter()
        .copied()
        .fold(T::lit(f64::NEG_INFINITY), |a, b| if b > a { b } else { a });
    if !max.is_finite() {
        return max;
    }
    let sum: T = values.iter().map(|&v| (v - max).exp()).sum();
    max + sum.ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn log_sum_exp_matches_direct_sum() {
        let v = [0.1_f64, -2.0, 3.5];
        let direct = v.iter().map(|x| x.exp()).sum::<f64>().ln();
        assert!((log_sum_exp(&v) - direct).abs() < 1e-14);
    }

    #[test]
    fn log_sum_exp_survives_underflow() {
        let v = [-1000.0_f64, -1000.0];
        assert!((log_sum_exp(&v) - (-1000.0 + 2f64.ln())).abs() < 1e-12);
        assert_eq!(log_sum_exp::<f64>(&[]), f64::NEG_INFINITY);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY, f64::NEG_INFINITY]), f64::NEG_INFINITY);
    }

    #[test]
    fn f32_lit_roundtrip() {
        assert_eq!(<f32 as Real>::lit(0.5), 0.5f32);
        assert_eq!(2.0f32.to_f64_lossy(), 2.0);
    }
}
