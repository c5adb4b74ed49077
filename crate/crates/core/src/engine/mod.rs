//! Minimal reverse-mode differentiation and SGD for residual MLPs.

mod graph;
mod optim;
mod tensor;

pub use graph::{Gradients, Graph, Mode, NodeId};
pub use optim::{sgd_step, OptimizerState, PlateauConfig};
pub use tensor::{Real, Tensor};
