//! The deep regression network and everything needed to train it.

pub mod activation;
pub mod adam;
pub mod batchnorm;
pub mod conv;
mod direct;
pub mod drn;
pub mod gradcheck;
pub mod loss;
pub mod pool;
pub mod scalar;
pub mod tensor;
pub mod upconv;

pub use activation::{activation, activation_backward, softplus, Activation};
pub use adam::{adam_step, AdamConfig, AdamState};
pub use batchnorm::BatchNorm3d;
pub use conv::{conv3d_backward, conv3d_forward, ConvGeometry};
pub use drn::{ArchConfig, ForwardCache, NetworkParams};
pub use loss::weighted_mse_loss;
pub use pool::{maxpool3d, maxpool3d_backward};
pub use scalar::Scalar;
pub use tensor::Tensor;
pub use upconv::{conv_transpose3d_backward, conv_transpose3d_forward};
