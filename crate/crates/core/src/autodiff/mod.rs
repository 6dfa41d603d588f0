//! Dense `f64` tensors, a define-by-run reverse-mode graph and Adam.

mod adam;
mod graph;
mod kernels;
mod lstm;
mod tensor;

pub use adam::{Adam, AdamConfig};
pub use graph::{Gradients, Graph, Var};
pub use lstm::{lstm_cell, lstm_cell_from_gates, LstmVars};
pub use tensor::Tensor;
