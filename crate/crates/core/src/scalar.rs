//! Scalar abstraction for the numeric kernels.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::str::FromStr;

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating point types the attention, conditioning and loss kernels run on.
///
/// `Display`/`FromStr` are required because parameter files store reals as
/// shortest round-trip decimal text.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Debug
    + Display
    + FromStr
    + Default
    + Send
    + Sync
    + 'static
{
    /// Post-softmax weights below this are snapped to exactly zero.
    fn snap_threshold() -> Self {
        Self::from_f64(1e-30).unwrap()
    }

    fn lit(x: f64) -> Self {
        Self::from_f64(x).unwrap()
    }

    /// The additive value used for a masked (`-inf`) attention entry: the most
    /// negative finite value, so masked logits never produce NaN.
    fn masked_logit() -> Self {
        Self::min_value()
    }
}

impl Real for f32 {}
impl Real for f64 {}
