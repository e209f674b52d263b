//! Dense tensors, the layer kernels the models need, losses, Adam, parameter
//! averaging and a finite-difference gradient checker.

mod gradcheck;
pub mod loss;
pub mod ops;
mod params;
mod tensor;

pub use gradcheck::{grad_check, MAX_COORDS_PER_TENSOR};
pub use loss::{confidence_penalty, cross_entropy, entropy, softmax, softmax_vec, LOG_EPS};
pub use params::{ema_update, Adam, Param, ParamGroup, ParamSet};
pub use tensor::Tensor;
