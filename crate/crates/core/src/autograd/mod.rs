//! Dense `f32` tensors with reverse-mode differentiation.

mod finite_diff;
mod tape;
mod tensor;

pub use finite_diff::{finite_diff_grad, FdStep};
pub use tape::{log_sum_exp, Gradients, OpKind, Padding, Tape, Var};
pub use tensor::Tensor;
