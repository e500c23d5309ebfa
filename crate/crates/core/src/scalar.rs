//! Numeric abstraction shared by the similarity and recommendation math.

use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point scalar used for similarities and predicted scores: `f32` or `f64`.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    /// Lossless for `f64`, rounding for `f32`.
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any float scalar")
    }

    fn from_rating(v: f32) -> Self {
        Self::from_f32(v).expect("finite f32 converts to any float scalar")
    }

    fn from_count(n: u64) -> Self {
        Self::from_u64(n).expect("integer converts to any float scalar")
    }

    fn two() -> Self {
        Self::one() + Self::one()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Total order for scalars that may be NaN; NaN compares equal so sorting never panics.
pub(crate) fn cmp_scalar<T: Scalar>(a: T, b: T) -> std::cmp::Ordering {
    a.partial_cmp(&b).unwrap_or(std::cmp::Ordering::Equal)
}
