//! Dense math with reverse-mode gradients, an optimizer and a gradient checker.

mod gradcheck;
mod optim;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, value_and_grad, GradCheckReport, RELATIVE_ERROR_FLOOR};
pub use optim::{AdamW, OptimizerState};
pub use params::{mlp_forward, mlp_on_tape, uniform, Activation, Bound, MlpParams, ParamSet};
pub use tape::{Grads, Tape, Var, LOG_FLOOR};
pub use tensor::{dot, sigmoid, softmax_rows, softplus, Tensor2};
