//! Dense matrices with define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every evaluation. Leaves created with
//! [`Graph::param`] accumulate gradients when [`Graph::backward`] runs from a
//! scalar node. [`Graph::grad_reverse`] is the identity going forward and
//! negates (and scales) the gradient going backward.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::finite_diff_check;
pub use graph::{Graph, Var};
pub use tensor::Tensor;
