/// Floating-point element type for the numeric paths: `f32` for
/// training-grade speed, `f64` for oracle- and gradient-grade precision.
pub trait Scalar: ndarray::NdFloat + num_traits::FromPrimitive {
    fn from_f64c(v: f64) -> Self {
        Self::from_f64(v).expect("f64 constant converts")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}
