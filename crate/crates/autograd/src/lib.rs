//! Small reverse-mode autodiff engine plus the transformer pieces built on it.

pub mod checkpoint;
pub mod gradcheck;
pub mod graph;
pub mod nn;
pub mod optim;
pub mod params;

pub use graph::{softmax_rows, Gradients, Graph, Mat, NodeId, Slot};
pub use optim::{AdamW, AdamWConfig, Adamax, AdamaxConfig, Optimizer};
pub use params::{Grads, ParamId, ParamStore};
