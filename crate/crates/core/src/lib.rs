//! Training-free receptive-field adaptation for convolutional diffusion
//! denoisers: re-dilated and dispersed convolutions, noise-damped guidance,
//! slice-partitioned attention and tile-synchronized GroupNorm, exercised
//! on a small U-Net with a DDIM sampler.

pub mod dispersion;
pub mod dten;
pub mod error;
pub mod guidance;
pub mod redilation;
pub mod render;
pub mod sampler;
pub mod tensor;
pub mod tiled;
pub mod unet;

pub use error::{Error, Result};
pub use tensor::{Kernel, Tensor};
