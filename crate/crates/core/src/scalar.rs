//! Floating point abstraction shared by the numeric modules.

use std::fmt::{Debug, Display};
use std::iter::{Product, Sum};

use ndarray::NdFloat;
use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar used by the delay model, the relaxed objective, the solver and
/// the recommender: `f32` or `f64`.
pub trait Scalar:
    NdFloat + Float + FromPrimitive + ToPrimitive + Sum + Product + Default + Debug + Display + Send + Sync
{
    /// Lossy conversion from an `f64` literal or configuration value.
    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable in every supported scalar")
    }

    fn of_usize(v: usize) -> Self {
        Self::from_usize(v).expect("usize is representable in every supported scalar")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Logistic function evaluated without overflow for large `|z|`.
#[inline]
pub fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// Derivative of [`sigmoid`], computed as `h(z) h(-z)` so it stays accurate in the tails.
#[inline]
pub fn sigmoid_grad<T: Scalar>(z: T) -> T {
    sigmoid(z) * sigmoid(-z)
}

#[inline]
pub fn relu<T: Scalar>(z: T) -> T {
    if z > T::zero() {
        z
    } else {
        T::zero()
    }
}
