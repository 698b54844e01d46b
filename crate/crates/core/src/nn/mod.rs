//! Minimal CPU layer stack with explicit forward caches and backward passes.

mod conv;
mod norm;
mod pool;
mod sequential;
mod tensor;
mod upsample;

pub use conv::{Conv2d, ConvTranspose2d};
pub use norm::{BatchNorm2d, BatchNormCache};
pub use pool::{max_pool2, max_pool2_backward};
pub use sequential::{BnMoments, Layer, LayerCache, Sequential, Tape};
pub use tensor::Tensor;
pub use upsample::{upsample_bicubic2, upsample_bicubic2_backward};
