//! Network building blocks: grouped convolution, pooling, fully connected
//! layers, activations and batch normalization.

mod conv;
mod linear;
mod norm;
mod pool;

pub use conv::{grouped_conv2d, Conv2dParams, Conv2dSpec};
pub use linear::{linear, LinearParams};
pub use norm::{batch_norm, update_running, BatchNormParams, BatchStats, BN_EPS, BN_MOMENTUM};
pub use pool::{channel_pool, global_avg_pool, ChannelPoolMode};

use crate::error::Result;
use crate::tensor::Tensor;

/// Whether a forward pass updates batch statistics (train) or uses the
/// running ones (eval).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
}

pub fn activation(x: &Tensor, kind: Activation) -> Result<Tensor> {
    match kind {
        Activation::Relu => x.relu(),
        Activation::Sigmoid => x.sigmoid(),
    }
}
