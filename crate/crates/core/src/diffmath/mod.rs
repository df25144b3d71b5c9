//! Dense tensors, a recording tape for reverse-mode differentiation, and a
//! finite-difference gradient checker.
//!
//! All arithmetic is `f64`. Broadcasting is limited to scalar-with-tensor.

mod gradcheck;
pub(crate) mod linalg;
mod ops;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_many, GradCheckReport};
pub use ops::{log_sigmoid, sigmoid, ReduceMode};
pub use tape::{concat, conv2d, linear_map, BackwardRule, Gradients, Tape, Var};
pub use tensor::Tensor;
