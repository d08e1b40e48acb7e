//! Dense tensors, a reverse-mode tape, and a finite-difference gradient checker.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{grad_check, GradCheckOptions, GradCheckReport, ParamCheck};
pub use graph::{Graph, Unary, Var};
pub use tensor::{Real, Tensor};
