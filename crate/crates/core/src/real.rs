//! Float abstraction for the formula-level operations, so the same code runs
//! at f32 inside the network and at f64 in gradient verification.

use num_traits::{Float, FromPrimitive};

pub trait Real:
    Float + FromPrimitive + ndarray::LinalgScalar + std::iter::Sum + std::fmt::Debug + Send + Sync
{
    /// Lift an f64 constant.
    fn c(v: f64) -> Self {
        Self::from_f64(v).expect("constant representable")
    }

    fn to_f64_(self) -> f64;
}

impl Real for f32 {
    fn to_f64_(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn to_f64_(self) -> f64 {
        self
    }
}
