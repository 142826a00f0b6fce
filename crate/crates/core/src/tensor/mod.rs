//! Dense matrices, a reverse-mode graph over them, gradient checking and Adam.

mod adam;
mod check;
mod graph;
mod matrix;

pub use adam::{AdamConfig, AdamState};
pub use check::grad_check;
pub use graph::{Gradients, Graph, Var, LAYER_NORM_EPS};
pub use matrix::Matrix;
