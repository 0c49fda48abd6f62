//! Tensor type, differentiable primitives, and gradient checking.

pub mod gradcheck;
pub mod ops;
pub mod tensor;

pub use gradcheck::{gradcheck, GradCheckReport};
pub use ops::{
    add, add_channel_bias, conv2d, conv2d_backward, conv2d_forward, instance_norm, mul, relu,
    scale, sigmoid, upsample_bilinear, GradPair,
};
pub use tensor::{idx4, Tensor};
