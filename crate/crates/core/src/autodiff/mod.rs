//! Dense tensors with reverse-mode automatic differentiation.

mod graph;
mod params;
mod tensor;

pub use graph::{Graph, Var, LAYER_NORM_EPS};
pub use params::{Bound, GradStore, ParamStore, CHECKPOINT_FORMAT};
pub use tensor::Tensor;
