//! Dense-matrix reverse-mode automatic differentiation.

mod matrix;
mod tape;

pub use matrix::DenseMatrix;
pub use tape::{Gradients, NodeId, Tape};
