use std::fmt::{Debug, Display};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar used by the geometry layer: f32 or f64.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + Debug + Display + Default + Send + Sync + 'static
{
    /// Tolerance for orientation and containment predicates, relative to the
    /// magnitude of the operands.
    fn geometric_epsilon() -> Self;

    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("literal representable in scalar type")
    }
}

impl Scalar for f32 {
    fn geometric_epsilon() -> Self {
        1e-5
    }
}

impl Scalar for f64 {
    fn geometric_epsilon() -> Self {
        1e-10
    }
}
