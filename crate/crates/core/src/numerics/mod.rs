//! Dense tensors, the recorded differentiation graph, shared activation and
//! loss primitives, the gradient checker and the Adam optimizer.

mod adam;
mod gradcheck;
mod graph;
pub mod ops;
mod tensor;

pub use adam::{AdamConfig, AdamState, ParamStore};
pub use gradcheck::{grad_check, GradCheckReport};
pub use graph::{DiffGraph, Gradients, Op, Var};
pub use ops::{
    add_bias, concat_channels, concat_rows, conv2d, cross_entropy, matmul, relu, sigmoid,
    slice_channels, slice_rows, softmax, transpose, upsample2x, Padding,
};
pub use tensor::Tensor;
