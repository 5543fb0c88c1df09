//! Minimal reverse-mode differentiation: tensors, a recording graph, dense
//! layers, an Adam optimizer and a finite-difference gradient checker.

mod check;
mod graph;
mod mlp;
mod params;
mod tensor;

pub use check::{finite_diff_check, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use mlp::{mlp_forward, Mlp};
pub use params::{optimizer_step, AdamConfig, Bound, GradSet, Param, ParamSet};
pub use tensor::Tensor;

#[allow(unused_imports)]
pub(crate) use graph::{log_sigmoid, sigmoid};
