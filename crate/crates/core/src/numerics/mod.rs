//! Tensor math beneath the model: dense tensors, forward kernels, the
//! autodiff tape, the optimizer and image resampling.

mod image;
pub mod ops;
mod optim;
mod scalar;
mod tape;
mod tensor;

pub use image::{bilinear_resize, crop, PixelRect};
pub use ops::{argmax, cross_entropy, gelu, layer_norm, matmul, relu, sigmoid, softmax};
pub use optim::{sgd_step, OptimizerState, WarmupCosine};
pub use scalar::{Scalar, ScalarKind};
pub use tape::{AttentionGeometry, Tape, Var};
pub use tensor::Tensor;
