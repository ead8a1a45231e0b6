//! Reverse-mode autodiff substrate: dense tensors, a recorded tape, and a
//! finite-difference verification oracle.

pub mod check;
pub mod graph;
pub mod tensor;

pub use check::{finite_diff_check, grad_check, grad_check_multi, rel_err};
pub use graph::{Grads, Graph, VarId};
pub use tensor::{Scalar, Tensor};
