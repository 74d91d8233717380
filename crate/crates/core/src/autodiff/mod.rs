//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation of one forward pass; [`Graph::backward`]
//! walks it in reverse creation order and accumulates gradients into the
//! trainable leaves. Graphs are single-threaded and meant to be rebuilt for
//! every optimization step.

mod gradcheck;
mod graph;
mod ops;
mod tensor;

pub use gradcheck::{grad_check, grad_check_at};
pub use graph::{Function, Graph, Var};
pub use ops::{BatchStats, Mode};
pub use tensor::Tensor;

