//! Dense tensors with reverse-mode differentiation, AdamW and finite-difference
//! gradient checks.

mod graph;
mod gradcheck;
mod optim;
mod tensor;

pub use gradcheck::{grad_check, grad_check_params, relative_error};
pub use graph::{attention_forward, AttentionSpec, Axis, Gradients, Graph, ParamStore, Var};
pub use optim::{warmup_schedule, AdamW};
pub use tensor::{gemm, MatView, MatViewMut, Scalar, Tensor};
