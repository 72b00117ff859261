//! Scalar abstraction shared by every numeric module.
//!
//! All math in this crate is written once against [`Scalar`] and
//! instantiated for `f64` (the default used by the pipeline) and `f32`.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

pub trait Scalar:
    Float + FromPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossless for `f64`, rounding for `f32`.
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("finite literal")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("float to f64")
    }

    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("usize to float")
    }
}

impl<T> Scalar for T where
    T: Float + FromPrimitive + Sum + Debug + Display + Default + Send + Sync + 'static
{
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn literal_round_trips() {
        assert_eq!(<f64 as Scalar>::lit(0.25), 0.25);
        assert_eq!(<f32 as Scalar>::lit(0.25), 0.25f32);
        assert_eq!(<f32 as Scalar>::from_usize_lossy(9), 9.0);
        assert_eq!(1.5f32.as_f64(), 1.5);
    }
}
