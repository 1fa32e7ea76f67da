//! Minimal differentiable tensor kernels and the convolution cost model.

mod activation;
mod adam;
mod conv;
mod cost;
mod linear;
mod pool;
pub mod reference;
mod tensor;

pub use activation::{relu_backward, relu_forward, tanh_backward, tanh_forward};
pub use adam::{adam_step, AdamConfig, AdamState};
pub use conv::{conv2d_backward, conv2d_forward, Conv2d, ConvMode, ConvSpec};
pub use cost::{
    cost_of, cost_of_dense, cost_of_rect, separable_pair, separable_reduction_ratio, total, CostReport,
    Fraction, LayerCost,
};
pub use linear::{fully_connected_backward, fully_connected_forward, Linear};
pub use pool::{maxpool_backward, maxpool_forward, MaxPoolCache};
pub use tensor::{Scalar, Tensor};
