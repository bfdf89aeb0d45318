//! Dense row-major tensors with reverse-mode automatic differentiation.
//!
//! Every sum in this crate runs sequentially over its innermost index, so
//! results are bit-for-bit reproducible. `f32` is used for training and
//! inference, `f64` for gradient checking against finite differences.

mod autograd;
mod element;
mod error;
mod gemm;
pub mod gradcheck;
pub mod ops;
mod tensor;

pub use element::Element;
pub use error::{Result, TensorError};
pub use gradcheck::{check_gradients, finite_diff_grad, GradReport};
pub use ops::{Activation, Conv2dOptions, PadMode};
pub use tensor::{grad_enabled, no_grad, BackwardArgs, NoGradGuard, Tensor};
