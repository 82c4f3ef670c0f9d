//! Frequency-aware compressed video super-resolution.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`] and [`autograd`]: dense `[c,h,w]` tensors and a reverse-mode
//!   differentiation engine with the spatial and spectral ops the model needs.
//! - [`frequency`]: centered FFTs, Gaussian band-pass masks, spectral
//!   decomposition, Haar DWT and box filtering.
//! - [`mgaa`]: frequency-domain motion estimation, kernel prediction and the
//!   cascaded warp + per-pixel separable convolution alignment.
//! - [`mffr`]: subband decomposition, progressive enhancement and aggregation.
//! - [`model`]: embedding, the three-level alignment tree, reconstruction head
//!   and presets.
//! - [`losses`]: Charbonnier and wavelet contrastive objectives.
//! - [`data`], [`metrics`], [`checkpoint`], [`train`]: the dataset pipeline,
//!   PSNR/SSIM/VMAF evaluation, on-disk checkpoints and the training loop.

pub mod autograd;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod error;
pub mod frequency;
pub mod image_io;
pub mod layers;
pub mod losses;
pub mod metrics;
pub mod mffr;
pub mod mgaa;
pub mod model;
pub mod tensor;
#[doc(hidden)]
pub mod testing;
pub mod train;

pub use error::{Error, Result};
pub use tensor::{Real, Tensor};
