use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive};

/// Floating-point element type of tensors and kernels (`f32` or `f64`).
pub trait Real:
    Float + FromPrimitive + Sum + Default + Debug + Display + Send + Sync + 'static
{
    /// Finite stand-in for minus infinity in log-space stabilizers.
    const NEG_SENTINEL: Self;
    const NAME: &'static str;

    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("literal representable")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Real for f32 {
    const NEG_SENTINEL: f32 = -1e30;
    const NAME: &'static str = "f32";
}

impl Real for f64 {
    const NEG_SENTINEL: f64 = -1e30;
    const NAME: &'static str = "f64";
}
