//! Minimal dense-tensor computation graph with reverse-mode
//! differentiation and an Adam optimizer.

mod dense;
mod graph;
mod init;
mod optim;

pub use dense::{numel, Tensor, TensorError};
pub use graph::{Bindings, Evaluation, Gradients, Graph, NodeId};
pub use init::init_params;
pub use optim::AdamState;
