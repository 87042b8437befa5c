//! Reverse-mode automatic differentiation over dense tensors.

mod backward;
mod graph;
mod optim;
mod params;

pub use backward::Gradients;
pub use graph::{Graph, Var, MASK_NEG};
pub use optim::{Optimizer, OptimizerConfig, Scheme};
pub use params::{ParamId, ParamStore};

#[cfg(test)]
mod tests;

/// Numerically stable softmax of one row.
pub fn softmax_f64(logits: &[f64]) -> Vec<f64> {
    graph::softmax_rows(logits, logits.len())
}
