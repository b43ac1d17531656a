//! Dense tensors, a reverse-mode tape, Adam, and a finite-difference oracle.

mod adam;
mod finite_diff;
mod param;
mod tape;
mod tensor;

pub use adam::{Adam, AdamConfig, AdamState};
pub use finite_diff::{finite_diff_grad, finite_diff_input, max_relative_error};
pub use param::{Param, ParamId, ParamStore};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;
