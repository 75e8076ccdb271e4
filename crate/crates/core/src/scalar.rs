use ndarray::NdFloat;
use num_traits::{FloatConst, FromPrimitive, ToPrimitive};

/// Floating-point element type for every tensor in the crate.
///
/// Implemented for `f32` and `f64`. Gradient checks run in `f64`; the
/// checkpoint and dataset formats always store `f32` on disk.
pub trait Scalar:
    NdFloat + FloatConst + FromPrimitive + ToPrimitive + Default + Send + Sync + 'static
{
    /// Converts an `f64` constant into this type.
    fn lit(v: f64) -> Self {
        Self::from_f64(v).expect("f64 literal representable")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("scalar converts to f64")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
