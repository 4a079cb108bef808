//! Dense `f64` tensors with a recording tape for reverse-mode gradients.

mod gradcheck;
mod params;
mod tape;
mod tensor;

pub use gradcheck::{grad_check, grad_check_report, loss_and_grads, GradCheckReport};
pub use params::{Grads, ParamId, ParamStore};
pub use tape::{Tape, Var, COSINE_EPS, LAYER_NORM_EPS};
pub use tensor::Tensor;
