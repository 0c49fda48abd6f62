//! Superpixel-consistency and instance-selective whitening losses for
//! domain-generalized binary segmentation, with a small hand-differentiated
//! encoder-decoder network, synthetic two-domain data, a training harness,
//! and evaluation metrics.

pub mod error;
pub mod scalar;

pub mod imaging;
pub mod slic;
pub mod slic_loss;
pub mod numerics;
pub mod metrics;
pub mod segnet;
pub mod synthdata;
pub mod train;
pub mod whitening;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// 32-bit tensor (checkpoint storage precision).
pub type Tensor32 = numerics::Tensor<f32>;
/// 64-bit tensor (working and gradcheck precision).
pub type Tensor64 = numerics::Tensor<f64>;
