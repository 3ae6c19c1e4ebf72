//! Minimal reverse-mode automatic differentiation over dense `f64` tensors.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{finite_diff_check, numeric_grad, relative_error, REL_FLOOR};
pub use graph::{Graph, Var};
pub use tensor::Tensor;

pub(crate) use tensor::{l2_norm, mean_std};
