//! Dense `f64` tensors with a taped reverse-mode gradient.
//!
//! Every operation evaluates eagerly and appends one node to a [`Graph`];
//! [`Graph::backward`] walks the tape in reverse from a scalar loss.

mod check;
mod graph;
mod tensor;

pub use check::{finite_diff_check, finite_diff_check_normwise};
pub use graph::{Graph, NodeId, Op};
pub use tensor::Tensor;

pub(crate) use graph::sigmoid;
pub(crate) use tensor::gemm;

#[cfg(test)]
mod tests;
