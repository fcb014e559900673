//! Minimal dense reverse-mode automatic differentiation.
//!
//! [`Tensor`] is a rank-1/2 row-major `f64` container; [`Tape`] records ops
//! and runs the reverse sweep; [`grad_check`] verifies any scalar-valued tape
//! program against central differences.

mod gradcheck;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, GradCheckReport};
pub use tape::{op_set, Grads, Tape, TapeError, Var};
pub use tensor::Tensor;
