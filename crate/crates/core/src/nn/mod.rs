//! Minimal neural-network kernels with hand-written backward passes.
//!
//! Activations are channels-last: `(batch, W, H, D, C)`. Every kernel is
//! generic over [`Scalar`] so the same code that trains in `f32` can be
//! checked against finite differences in `f64`.

mod adam;
mod conv;
mod linear;
mod norm;
mod ops;
mod param;

pub use adam::{Adam, AdamConfig, AdamState};
pub use conv::{conv3d_backward, conv3d_forward, Conv3dGrads};
pub use linear::{linear_backward, linear_forward};
pub use norm::{batch_norm_backward, batch_norm_forward, BatchNormCache};
pub use ops::{
    concat_channels, l2_normalize_rows, l2_normalize_rows_backward, maxpool2_backward,
    maxpool2_forward, relu, relu_backward, softmax_last, softmax_last_backward,
    split_channels, upsample2_backward, upsample2_forward,
};
pub use param::{Param, ParamVisitor};

use std::fmt::Debug;

/// Floating-point element type accepted by the kernels.
pub trait Scalar:
    ndarray::LinalgScalar
    + num_traits::Float
    + num_traits::FromPrimitive
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + std::ops::DivAssign
    + ndarray::ScalarOperand
    + std::iter::Sum
    + Send
    + Sync
    + Debug
    + Default
    + 'static
{
    fn of(v: f64) -> Self {
        <Self as num_traits::FromPrimitive>::from_f64(v).expect("representable constant")
    }
}

impl Scalar for f32 {}
impl Scalar for f64 {}

/// Whether batch statistics (train) or running statistics (eval) are used.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
    /// Batch statistics, folded into a cumulative average of the running
    /// statistics after `seen` earlier batches.
    Calibrate { seen: usize },
}
