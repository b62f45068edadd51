//! Dense NCHW tensors with a small reverse-mode autodiff tape covering the
//! ops the segmentation network needs.

mod gradcheck;
mod graph;
pub(crate) mod kernels;
mod tensor;

pub use gradcheck::grad_check;
pub use graph::{
    backward, sigmoid, BatchNormConfig, Gradients, Graph, Mode, PointwiseLoss, RunningStats, Var,
};
pub use tensor::Tensor;
