//! Dense compute kernels with reverse-mode gradients.

pub mod activation;
pub mod channel;
pub mod conv;
pub mod counter;
pub mod linear;
pub mod norm;
pub mod pool;

pub use activation::{gelu, gelu_backward, hard_sigmoid, hard_sigmoid_backward, sigmoid, sigmoid_backward};
pub use channel::{add, concat_channels, mul_channel_gate, mul_channel_gate_backward, split_channels};
pub use conv::{conv2d_backward, conv2d_forward, conv_padding, ConvGrads, ConvParams};
pub use counter::count_multiplies;
pub use linear::{
    fully_connected, fully_connected_backward, pointwise_linear, pointwise_linear_backward, LinearGrads,
    LinearParams,
};
pub use norm::{
    batchnorm_backward, batchnorm_forward, batchnorm_forward_cached, layernorm_backward, layernorm_forward,
    layernorm_forward_cached, Mode, NormCache, NormGrads, NormKind, NormParams,
};
pub use pool::{global_avg_pool, global_avg_pool_backward};
