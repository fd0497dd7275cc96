//! Reverse-mode differentiation over small dense `f64` tensors.
//!
//! Forward ops are methods on [`Graph`]; each records its inputs and the data
//! its gradient rule needs. [`Graph::backward`] walks the tape in reverse.

mod graph;
mod tensor;

pub use graph::{Gradients, Graph, Var, LAYER_NORM_EPS};
pub use tensor::{Tensor, MAX_RANK};
