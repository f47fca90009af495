//! Forward-model estimation and tiled non-blind deblurring for paired
//! sharp/blurry images.
//!
//! The pipeline: estimate a polynomial warp aligning a sharp image with
//! its blurry counterpart, estimate a point spread function and
//! brightness offset from the aligned pair, synthesize blurred training
//! data with the estimated forward model, and deblur large images tile
//! by tile with classical non-blind backends.

pub mod conv;
pub mod error;
mod fft;
pub mod eval;
pub mod image;
pub mod optim;
pub mod pipeline;
pub mod psf;
pub mod warp;

pub use crate::conv::{conv_fft, conv_naive, correlate_fft, correlate_naive, ConvMode, Kernel2D};
pub use crate::error::{Error, Result};
pub use crate::image::{mse, psnr, Image};
