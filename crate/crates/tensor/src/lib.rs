//! Minimal dense float64 tensor math with reverse-mode differentiation.

pub mod checkpoint;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod kernels;
pub mod param;
pub mod primitive_checks;
pub mod tensor;

pub use checkpoint::{Checkpoint, NamedTensor};
pub use error::{Result, TensorError};
pub use gradcheck::{gradient_check, gradient_check_params, relative_error};
pub use graph::{Gradients, Graph, Var};
pub use primitive_checks::{check_all_primitives, check_primitive, primitive_names, PrimitiveCheck};
pub use param::{GradStore, Init, ParamId, ParamStore, Parameter};
pub use tensor::Tensor;
