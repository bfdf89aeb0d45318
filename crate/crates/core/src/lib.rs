//! Dual-path lightweight super-resolution network: a transformer path of
//! axial and square window attention beside a convolutional path of
//! separable residual blocks, fused per stage and upsampled by sub-pixel
//! convolution. Includes data synthesis, metrics and a trainer.

pub mod attention;
pub mod checkpoint;
pub mod config;
pub mod conv_branch;
pub mod data;
pub mod error;
pub mod fusion;
pub mod gradsuite;
pub mod layers;
pub mod metrics;
pub mod model;
pub mod train;

pub use dmffn_tensor::{Element, GradReport};
pub use error::{Error, Result};
pub use model::{build_model, Model, ModelConfig};
