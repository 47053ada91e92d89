use ndarray::NdFloat;
use num_traits::{FromPrimitive, ToPrimitive};

/// Floating-point element type the numerical core is generic over.
///
/// Implemented for `f32` and `f64`. Model files always store values as
/// `f64`, which represents every `f32` exactly, so persistence is lossless
/// for both.
pub trait Scalar: NdFloat + FromPrimitive + ToPrimitive + Default {
    /// Converts an `f64` constant into `Self`.
    fn lit(value: f64) -> Self {
        Self::from_f64(value).expect("f64 constant representable in scalar type")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    /// Logistic function, evaluated without overflow for large |x|.
    fn logistic(self) -> Self {
        let one = Self::one();
        if self >= Self::zero() {
            one / (one + (-self).exp())
        } else {
            let e = self.exp();
            e / (one + e)
        }
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn logistic_is_symmetric_and_saturates_without_nan() {
        for &x in &[-800.0_f64, -50.0, -1.0, 0.0, 1.0, 50.0, 800.0] {
            let s = x.logistic();
            assert!(s.is_finite());
            assert!((s + (-x).logistic() - 1.0).abs() < 1e-15);
        }
        assert_eq!(0.0_f32.logistic(), 0.5);
    }
}
