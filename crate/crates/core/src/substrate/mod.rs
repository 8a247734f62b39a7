//! Differentiable computation substrate: tensors, convolution kernels, a
//! reverse-mode tape, parameters with SGD, and finite-difference checks.

pub mod conv;
pub mod gradcheck;
pub mod graph;
pub mod params;
mod scalar;
mod tensor;

pub use gradcheck::{gradient_check, graph_fn};
pub use graph::{Grads, Graph, Mode, Var};
pub use params::{sgd_update, InitScheme, Param, ParamId, ParamKind, ParamStore};
pub use scalar::{gemm, MatLayout, Scalar};
pub use tensor::Tensor;
