//! Reverse-mode automatic differentiation: dense tensors, a recording
//! graph with the neural-net op set, AdamW, gradient verification, and
//! checkpoint IO.

mod checkpoint;
mod gradcheck;
mod graph;
mod store;
mod tensor;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport};
pub use graph::{Graph, NodeId};
pub use store::{AdamW, Binding, ParameterStore};
pub use tensor::Tensor;
