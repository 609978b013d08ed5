use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Scalar type the numeric core is generic over.
///
/// Training runs on `f32`; gradient checking switches to `f64` for
/// finite-difference headroom. Concrete aliases live at the crate root.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + std::fmt::Debug + std::fmt::Display + Send + Sync + 'static
{
    fn of_f64(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).unwrap()
    }
    fn as_f64(self) -> f64 {
        <Self as ToPrimitive>::to_f64(&self).unwrap()
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
