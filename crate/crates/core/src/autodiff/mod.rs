//! Dense reverse-mode automatic differentiation over `f64` tensors.
//!
//! Parameters live in a [`ParamStore`]; each forward pass records onto a
//! fresh [`Graph`], and [`Graph::backward`] fills gradients for the tracked
//! leaves. Graphs are single-threaded, but independent graphs over the same
//! store can run on different threads and their [`GradSet`]s be summed in a
//! fixed order.

pub mod checkpoint;
pub mod gradcheck;
mod graph;
pub mod init;
pub mod optim;
mod params;
mod tensor;

pub use graph::{gemm, inject_gradient_fault, Graph, Var, LAYER_NORM_EPS};
pub use optim::{Adam, Optimizer, OptimizerKind, Sgd};
pub use params::{GradSet, Param, ParamId, ParamStore};
pub use tensor::Tensor;
