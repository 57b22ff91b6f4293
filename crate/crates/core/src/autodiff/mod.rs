//! Dense tensors, a differentiable tape, SGD and gradient checking.

pub mod gradcheck;
pub mod graph;
pub mod optim;
pub mod params;
pub mod tensor;

pub use gradcheck::{compare, finite_difference, grad_check, GradCheck};
pub use graph::{Graph, Var};
pub use optim::{adam_step, AdamConfig, AdamState, sgd_step, sgd_step_graph, unrolled_grad, MetaGradMode, SgdConfig};
pub use params::{grad_map, Bound, GradMap, ParamStore};
pub use tensor::Tensor;
