//! Dense f64 tensors, a reverse-mode operation tape, and gradient checking.

mod gradcheck;
mod graph;
mod params;
mod tensor;

pub use gradcheck::{grad_check, relative_error, GradCheckConfig, GradCheckReport, Worst};
pub use graph::{gelu_scalar, softmax_rows, Graph, Var, FAULTABLE_OPS};
pub use params::{Bound, Grads, Param, ParamId, ParamStore};
pub use tensor::Tensor;
