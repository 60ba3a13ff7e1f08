//! Tensors, reverse-mode differentiation, gradient checking and reproducible randomness.

pub mod gradcheck;
pub mod graph;
pub mod rng;
pub mod tensor;

pub use gradcheck::{grad_check, op_suite, relative_error, GradCheckReport};
pub use graph::{Gradients, Graph, Var};
pub use rng::Rng;
pub use tensor::{gelu, layer_norm, matmul, normal_cdf, softmax, Tensor};
