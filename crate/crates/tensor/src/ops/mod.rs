//! Differentiable operations.

mod activation;
mod conv;
mod elementwise;
mod loss;
mod matmul;
mod norm;
mod pool;
mod reduce;
mod resize;
mod shape;
mod softmax;

pub use activation::{activation, Activation};
pub use conv::{conv2d, Conv2dOptions};
pub use elementwise::{elementwise, BinaryOp};
pub use loss::l1_loss;
pub use matmul::{linear, matmul};
pub use norm::{layer_norm, layer_norm_axis};
pub use pool::{global_avg_pool, max_pool2d};
pub use resize::resize_bilinear;
pub use shape::{
    concat, crop2d, gather, pad2d, pixel_shuffle, pixel_unshuffle, reflect_index, strides, PadMode,
    ZERO_FILL,
};
pub use softmax::softmax;
