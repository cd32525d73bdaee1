//! Learned image compression with frequency-aware transformer transforms.
//!
//! The codec pairs analysis/synthesis transforms built from
//! frequency-decomposition window attention (FDWA) and frequency-modulation
//! feed-forward networks (FMFFN) with a channel-wise autoregressive entropy
//! model and a bit-exact range coder. A desk-scale training loop, metrics
//! (PSNR, MS-SSIM, BD-rate), and analysis exports round out the toolkit.

pub mod analysis;
pub mod bitstream;
pub mod checkpoint;
pub mod codec;
pub mod coder;
pub mod error;
pub mod fdwa;
pub mod fmffn;
pub mod metrics;
pub mod model;
pub mod parallel;
pub mod tca;
pub mod tensor;
#[doc(hidden)]
pub mod testutil;
pub mod train;
pub mod transforms;

pub use error::{Error, Result};
pub use tensor::{Element, Tensor};
