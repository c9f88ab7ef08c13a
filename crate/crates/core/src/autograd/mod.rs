//! Reverse-mode automatic differentiation over [`Tensor`](crate::tensor::Tensor).

mod graph;
pub mod kernels;

pub use graph::{softmax_channels, Gradients, Graph, NodeId};
pub use kernels::ConvGeom;
