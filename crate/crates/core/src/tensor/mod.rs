//! Dense tensors and a reverse-mode autodiff graph that supports
//! differentiating through gradients.

mod gradvec;
mod graph;
pub mod kernels;
mod value;

pub use gradvec::{GradientVector, Segment};
pub use graph::{Elementwise, Graph, Reduction, Var};
pub use value::Tensor;
