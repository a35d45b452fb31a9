//! Reverse-mode automatic differentiation over real tensors.
//!
//! A [`Graph`] is a tape: every operation appends a node holding its value
//! and a record of how it was computed, so node order is already a
//! topological order. [`Graph::backward`] walks the tape in reverse and
//! accumulates gradients into every node that requires them. Leaves created
//! with `requires_grad = false` (frozen parameters, inputs) never receive a
//! gradient.
//!
//! Complex quantities enter as separate real and imaginary channels; there is
//! no complex differentiation.

mod attention;
mod check;
mod graph;
mod tensor;

pub use attention::{attention_heads, multi_head_attention, AttentionWeights};
pub use check::{grad_check, grad_check_with, CheckOptions, GradCheck, Mismatch};
pub use graph::{Graph, Var};
pub use tensor::Tensor;

#[cfg(test)]
mod tests;
