//! Reverse-mode automatic differentiation.

mod graph;
pub mod gradcheck;

pub use gradcheck::{grad_check, grad_check_coords, grad_check_many, relative_error, GradCheck};
pub use graph::{Gradients, Graph, Var, LAYER_NORM_EPS};
pub(crate) use graph::softmax_in_place;
