//! Scalar abstraction for the numeric kernel.
//!
//! The tensor and graph machinery is generic over the element type so the
//! same code runs at f32 or f64. Everything user-facing defaults to f64
//! through the aliases at the crate root; gradient checks and the diffusion
//! identities need the 64-bit headroom.

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};
use std::fmt::{Debug, Display};

/// Element type accepted by [`crate::tensor::Tensor`] and the autodiff graph.
pub trait Scalar:
    Float + FromPrimitive + ToPrimitive + NumAssign + Copy + Debug + Display + Send + Sync + 'static
{
    /// Lossy conversion from f64, used when ingesting literals and RNG draws.
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to any float scalar")
    }

    /// Widening conversion to f64 for reporting and serialization.
    fn as_f64(self) -> f64 {
        self.to_f64().expect("float scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
