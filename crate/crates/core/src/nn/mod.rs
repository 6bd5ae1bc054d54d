//! Minimal dense tensor and layer kernels with hand-written backward passes.
//!
//! Every layer is a pair of free functions: a forward that returns whatever
//! the backward needs, and a backward that maps an output gradient to input
//! and parameter gradients. Models compose them in a fixed order.

mod activation;
mod adam;
mod batchnorm;
mod channel;
mod conv;
mod linear;
mod loss;
mod param;
mod pool;
mod scalar;
mod tensor;

pub use activation::{relu, relu_backward, sigmoid, sigmoid_backward};
pub use adam::{adam_step, AdamState, PlateauScheduler};
pub use batchnorm::{
    batchnorm2d, batchnorm2d_backward, batchnorm2d_forward, BatchStats, BnCache, BnForward, BnGrads,
    BnMode, RunningStats,
};
pub use channel::{
    channel_concat, channel_shuffle, channel_shuffle_backward, channel_split, scale_channels,
    scale_channels_backward, shuffle_target,
};
pub use conv::{
    conv2d, conv2d_backward, conv_output_size, depthwise_conv2d, depthwise_conv2d_backward, ConvGrads,
};
pub use linear::{linear, linear_backward};
pub use loss::mse_loss;
pub use param::{Param, ParamId, ParamStore};
pub use pool::{global_avg_pool, global_avg_pool_backward, maxpool2d_3x3_s1};
pub use scalar::Scalar;
pub use tensor::{Tensor, TensorF};
