//! Frequency-modulation feed-forward network.
//!
//! A pointwise two-layer FFN (1x1 conv, GELU, 1x1 conv) followed by a learned
//! spectral filter: the output is split into non-overlapping square blocks,
//! each block is taken to the frequency domain with a 2-D FFT, multiplied by
//! a per-channel complex filter W, and transformed back (real part kept).
//!
//! W is initialized to all-ones, which makes the spectral stage an exact
//! identity; an untrained FMFFN therefore behaves as a plain FFN. Inputs whose
//! extents are not multiples of the block are zero-padded and cropped around
//! the spectral stage.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{conv2d, freq_modulate, Element, Tensor};

/// Parameters of one FMFFN layer.
pub struct FmffnParams<E: Element> {
    pub channels: usize,
    /// FFT block edge length; must be a power of two.
    pub block: usize,
    /// [e*C, C, 1, 1]
    pub w1: Tensor<E>,
    pub b1: Tensor<E>,
    /// [C, e*C, 1, 1]
    pub w2: Tensor<E>,
    pub b2: Tensor<E>,
    /// [C, block, block] real part of the spectral filter.
    pub w_re: Tensor<E>,
    /// [C, block, block] imaginary part.
    pub w_im: Tensor<E>,
}

impl<E: Element> FmffnParams<E> {
    pub fn new<R: Rng>(
        channels: usize,
        expansion: usize,
        block: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if block == 0 || !block.is_power_of_two() {
            return Err(Error::Config(format!(
                "fmffn: block size {block} must be a power of two"
            )));
        }
        if expansion == 0 {
            return Err(Error::Config("fmffn: expansion must be positive".into()));
        }
        let hidden = expansion * channels;
        let std1 = 1.0 / (channels as f64).sqrt();
        let std2 = 1.0 / (hidden as f64).sqrt();
        Ok(FmffnParams {
            channels,
            block,
            w1: Tensor::randn(&[hidden, channels, 1, 1], std1, rng).tracked(),
            b1: Tensor::zeros(&[hidden]).tracked(),
            w2: Tensor::randn(&[channels, hidden, 1, 1], std2, rng).tracked(),
            b2: Tensor::zeros(&[channels]).tracked(),
            w_re: Tensor::full(&[channels, block, block], E::one()).tracked(),
            w_im: Tensor::zeros(&[channels, block, block]).tracked(),
        })
    }

    pub fn parameters(&self) -> Vec<(&'static str, Tensor<E>)> {
        vec![
            ("w1", self.w1.clone()),
            ("b1", self.b1.clone()),
            ("w2", self.w2.clone()),
            ("b2", self.b2.clone()),
            ("w_re", self.w_re.clone()),
            ("w_im", self.w_im.clone()),
        ]
    }
}

/// The pointwise FFN stage alone.
pub fn ffn<E: Element>(x: &Tensor<E>, params: &FmffnParams<E>) -> Result<Tensor<E>> {
    let h = conv2d(x, &params.w1, Some(&params.b1), 1, 0, 1)?.gelu();
    conv2d(&h, &params.w2, Some(&params.b2), 1, 0, 1)
}

/// Full FMFFN: pointwise FFN then per-block spectral filtering.
pub fn fmffn_forward<E: Element>(x: &Tensor<E>, params: &FmffnParams<E>) -> Result<Tensor<E>> {
    let sh = x.shape();
    if sh.len() != 3 || sh[0] != params.channels {
        return Err(Error::Dim(format!(
            "fmffn: expected [{}, H, W], got {sh:?}",
            params.channels
        )));
    }
    let (h, w) = (sh[1], sh[2]);
    let b = params.block;
    let y = ffn(x, params)?;
    let ph = (b - h % b) % b;
    let pw = (b - w % b) % b;
    let padded = if ph > 0 || pw > 0 {
        y.pad2d_zero(0, ph, 0, pw)
    } else {
        y
    };
    let filtered = freq_modulate(&padded, &params.w_re, &params.w_im, (b, b))?;
    Ok(if ph > 0 || pw > 0 {
        filtered.crop2d(0, 0, h, w)
    } else {
        filtered
    })
}
