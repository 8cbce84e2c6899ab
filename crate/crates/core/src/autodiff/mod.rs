//! Minimal reverse-mode automatic differentiation over dense tensors.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, rel_error, GradReport, LeafReport, DEFAULT_EPS, DEFAULT_TOL};
pub use graph::{length_mask, Graph, Var};
pub use tensor::{Float, Tensor};
