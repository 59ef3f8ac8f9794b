//! Minimal reverse-mode automatic differentiation over dense tensors.
//!
//! A [`Tape`] records operations in evaluation order; [`Tape::backward`]
//! walks it in reverse and accumulates gradients into leaves created with
//! [`Tape::param`] (or [`Tape::leaf`] on a tensor with `requires_grad`).
//! Only scalar-tensor broadcasting is supported; every other shape must
//! match exactly.

mod gradcheck;
mod kernels;
mod tape;
mod tensor;

pub use gradcheck::{ad_gradient, fd_gradient, grad_check, max_relative_error};
pub use kernels::{matmul, transpose};
pub use tape::{OpKind, Tape, Var};
pub use tensor::{Real, Tensor};
