//! Differentiable-computation substrate: tensors, a reverse-mode tape, and a
//! finite-difference checker for the gradients it produces.

mod gradcheck;
mod scalar;
mod tape;
mod tensor;

pub use gradcheck::{relative_error, relative_error_floor, GradCheck, GradCheckReport, ParamCheck};
pub use scalar::Scalar;
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
