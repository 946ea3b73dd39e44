//! Minimal dense-network core: matrices, layers with analytic backward
//! passes, the MSE loss, SGD over parameter groups, and text checkpoints.

mod checkpoint;
mod layer;
mod loss;
mod matrix;
mod optim;

pub use checkpoint::Checkpoint;
pub use layer::{Activation, DenseLayer, Mlp, SELU_ALPHA, SELU_LAMBDA};
pub use loss::mse_loss;
pub use matrix::Matrix;
pub(crate) use matrix::dot;
pub use optim::{sgd_step, ParamGroup, Sgd, Tensor};
