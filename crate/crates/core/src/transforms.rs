//! Analysis/synthesis transforms and their hyper counterparts.
//!
//! The main analysis transform stacks four stride-2 residual downsampling
//! blocks; after the second, third, and fourth a pair of frequency-aware
//! transformer (FAT) blocks refines the features. Each FAT block is
//! pre-normalized: `x + FDWA(GN(x))` then `x + FMFFN(GN(x))`, with the second
//! block of every pair running the shifted window variant. The synthesis
//! transform mirrors this with pixel-shuffle upsampling. The hyper transforms
//! use the same blocks at scale 1 around a pair of stride-2 stages.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fdwa::{fdwa_forward, fdwa_forward_captured, FdwaParams};
use crate::fmffn::{fmffn_forward, FmffnParams};
use crate::tensor::{conv2d, group_norm, Element, Tensor};

const LEAKY_SLOPE: f64 = 0.01;
const GN_EPS: f64 = 1e-6;

/// Channel widths, attention geometry, and scale of the four transforms.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TransformConfig {
    /// Widths of the first three downsampling stages.
    pub channels: [usize; 3],
    /// Latent width M (fourth stage).
    pub latent: usize,
    /// Hyper latent width N.
    pub hyper: usize,
    /// Window scale of the main transforms.
    pub s: usize,
    /// Window scale of the hyper transforms.
    pub hyper_s: usize,
    /// Heads of the FAT pairs after stages 2, 3, 4.
    pub heads: [usize; 3],
    pub hyper_heads: usize,
    /// FMFFN hidden expansion factor.
    pub expansion: usize,
    /// Learned relative position bias in the attention.
    pub attn_bias: bool,
}

impl TransformConfig {
    /// Full-size preset.
    pub fn full() -> Self {
        TransformConfig {
            channels: [96, 144, 256],
            latent: 320,
            hyper: 192,
            s: 4,
            hyper_s: 1,
            heads: [8, 16, 32],
            hyper_heads: 32,
            expansion: 2,
            attn_bias: true,
        }
    }

    /// Desk-scale preset for tests and quick experiments.
    pub fn toy() -> Self {
        TransformConfig {
            channels: [16, 24, 32],
            latent: 40,
            hyper: 24,
            s: 2,
            hyper_s: 1,
            heads: [4, 4, 4],
            hyper_heads: 4,
            expansion: 2,
            attn_bias: true,
        }
    }
}

/// Convolution layer with bias.
pub struct ConvLayer<E: Element> {
    pub w: Tensor<E>,
    pub b: Tensor<E>,
    pub stride: usize,
    pub pad: usize,
    pub groups: usize,
}

impl<E: Element> ConvLayer<E> {
    pub fn new<R: Rng>(
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        pad: usize,
        groups: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (cin / groups * k * k) as f64;
        ConvLayer {
            w: Tensor::randn(&[cout, cin / groups, k, k], 1.0 / fan_in.sqrt(), rng).tracked(),
            b: Tensor::zeros(&[cout]).tracked(),
            stride,
            pad,
            groups,
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        conv2d(x, &self.w, Some(&self.b), self.stride, self.pad, self.groups)
    }

    pub fn parameters(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        out.push((format!("{prefix}.w"), self.w.clone()));
        out.push((format!("{prefix}.b"), self.b.clone()));
    }
}

/// Residual block with stride-2 downsampling.
pub struct Rbs<E: Element> {
    conv1: ConvLayer<E>,
    conv2: ConvLayer<E>,
    skip: ConvLayer<E>,
}

impl<E: Element> Rbs<E> {
    pub fn new<R: Rng>(cin: usize, cout: usize, rng: &mut R) -> Self {
        Rbs {
            conv1: ConvLayer::new(cin, cout, 3, 2, 1, 1, rng),
            conv2: ConvLayer::new(cout, cout, 3, 1, 1, 1, rng),
            skip: ConvLayer::new(cin, cout, 1, 2, 0, 1, rng),
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let slope = E::from_f64(LEAKY_SLOPE);
        let h = self.conv1.forward(x)?.leaky_relu(slope);
        let h = self.conv2.forward(&h)?;
        Ok(h.add(&self.skip.forward(x)?).leaky_relu(slope))
    }

    pub fn parameters(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        self.conv1.parameters(&format!("{prefix}.conv1"), out);
        self.conv2.parameters(&format!("{prefix}.conv2"), out);
        self.skip.parameters(&format!("{prefix}.skip"), out);
    }
}

/// Residual block with 2x pixel-shuffle upsampling.
pub struct Rbu<E: Element> {
    conv1: ConvLayer<E>,
    conv2: ConvLayer<E>,
    skip: ConvLayer<E>,
    /// Final synthesis stage omits the trailing activation.
    activate: bool,
}

impl<E: Element> Rbu<E> {
    pub fn new<R: Rng>(cin: usize, cout: usize, activate: bool, rng: &mut R) -> Self {
        Rbu {
            conv1: ConvLayer::new(cin, cout * 4, 3, 1, 1, 1, rng),
            conv2: ConvLayer::new(cout, cout, 3, 1, 1, 1, rng),
            skip: ConvLayer::new(cin, cout * 4, 1, 1, 0, 1, rng),
            activate,
        }
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let slope = E::from_f64(LEAKY_SLOPE);
        let h = self.conv1.forward(x)?.pixel_shuffle(2).leaky_relu(slope);
        let h = self.conv2.forward(&h)?;
        let y = h.add(&self.skip.forward(x)?.pixel_shuffle(2));
        Ok(if self.activate {
            y.leaky_relu(slope)
        } else {
            y
        })
    }

    pub fn parameters(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        self.conv1.parameters(&format!("{prefix}.conv1"), out);
        self.conv2.parameters(&format!("{prefix}.conv2"), out);
        self.skip.parameters(&format!("{prefix}.skip"), out);
    }
}

/// Pre-normalized transformer block: window attention then spectral FFN.
pub struct FatBlock<E: Element> {
    gn1_g: Tensor<E>,
    gn1_b: Tensor<E>,
    pub fdwa: FdwaParams<E>,
    gn2_g: Tensor<E>,
    gn2_b: Tensor<E>,
    pub fmffn: FmffnParams<E>,
    shifted: bool,
}

impl<E: Element> FatBlock<E> {
    pub fn new<R: Rng>(
        channels: usize,
        heads: usize,
        s: usize,
        expansion: usize,
        attn_bias: bool,
        shifted: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(FatBlock {
            gn1_g: Tensor::full(&[channels], E::one()).tracked(),
            gn1_b: Tensor::zeros(&[channels]).tracked(),
            fdwa: FdwaParams::new(channels, heads, s, attn_bias, rng)?,
            gn2_g: Tensor::full(&[channels], E::one()).tracked(),
            gn2_b: Tensor::zeros(&[channels]).tracked(),
            fmffn: FmffnParams::new(channels, expansion, 4 * s, rng)?,
            shifted,
        })
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        Ok(self.forward_inner(x, false)?.0)
    }

    /// Forward pass that also returns the four per-group attention outputs.
    pub fn forward_captured(&self, x: &Tensor<E>) -> Result<(Tensor<E>, Vec<Tensor<E>>)> {
        let (y, caps) = self.forward_inner(x, true)?;
        Ok((y, caps.expect("capture requested")))
    }

    fn forward_inner(
        &self,
        x: &Tensor<E>,
        capture: bool,
    ) -> Result<(Tensor<E>, Option<Vec<Tensor<E>>>)> {
        let n1 = group_norm(x, 1, &self.gn1_g, &self.gn1_b, E::from_f64(GN_EPS))?;
        let (attn, caps) = if capture {
            let (a, c) = fdwa_forward_captured(&n1, &self.fdwa, self.shifted)?;
            (a, Some(c))
        } else {
            (fdwa_forward(&n1, &self.fdwa, self.shifted)?, None)
        };
        let x = x.add(&attn);
        let n2 = group_norm(&x, 1, &self.gn2_g, &self.gn2_b, E::from_f64(GN_EPS))?;
        Ok((x.add(&fmffn_forward(&n2, &self.fmffn)?), caps))
    }

    pub fn parameters(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        out.push((format!("{prefix}.gn1.g"), self.gn1_g.clone()));
        out.push((format!("{prefix}.gn1.b"), self.gn1_b.clone()));
        for (n, t) in self.fdwa.parameters() {
            out.push((format!("{prefix}.fdwa.{n}"), t));
        }
        out.push((format!("{prefix}.gn2.g"), self.gn2_g.clone()));
        out.push((format!("{prefix}.gn2.b"), self.gn2_b.clone()));
        for (n, t) in self.fmffn.parameters() {
            out.push((format!("{prefix}.fmffn.{n}"), t));
        }
    }
}

/// Two FAT blocks, the second one shifted.
pub struct FatPair<E: Element> {
    pub a: FatBlock<E>,
    pub b: FatBlock<E>,
}

impl<E: Element> FatPair<E> {
    pub fn new<R: Rng>(
        channels: usize,
        heads: usize,
        s: usize,
        expansion: usize,
        attn_bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        Ok(FatPair {
            a: FatBlock::new(channels, heads, s, expansion, attn_bias, false, rng)?,
            b: FatBlock::new(channels, heads, s, expansion, attn_bias, true, rng)?,
        })
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        self.b.forward(&self.a.forward(x)?)
    }

    /// Forward with per-group capture from the second (shifted) block.
    pub fn forward_captured(&self, x: &Tensor<E>) -> Result<(Tensor<E>, Vec<Tensor<E>>)> {
        self.b.forward_captured(&self.a.forward(x)?)
    }

    pub fn parameters(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        self.a.parameters(&format!("{prefix}.0"), out);
        self.b.parameters(&format!("{prefix}.1"), out);
    }
}

/// Image -> latent analysis transform (16x spatial reduction).
pub struct AnalysisTransform<E: Element> {
    rbs: [Rbs<E>; 4],
    fats: [FatPair<E>; 3],
}

impl<E: Element> AnalysisTransform<E> {
    pub fn new<R: Rng>(cfg: &TransformConfig, rng: &mut R) -> Result<Self> {
        let [c1, c2, c3] = cfg.channels;
        Ok(AnalysisTransform {
            rbs: [
                Rbs::new(3, c1, rng),
                Rbs::new(c1, c2, rng),
                Rbs::new(c2, c3, rng),
                Rbs::new(c3, cfg.latent, rng),
            ],
            fats: [
                FatPair::new(c2, cfg.heads[0], cfg.s, cfg.expansion, cfg.attn_bias, rng)?,
                FatPair::new(c3, cfg.heads[1], cfg.s, cfg.expansion, cfg.attn_bias, rng)?,
                FatPair::new(
                    cfg.latent,
                    cfg.heads[2],
                    cfg.s,
                    cfg.expansion,
                    cfg.attn_bias,
                    rng,
                )?,
            ],
        })
    }

    pub fn forward(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        Ok(self.forward_inner(x)?.0)
    }

    /// The FAT pair closest to the latent (the last one).
    pub fn deepest_fat(&self) -> &FatPair<E> {
        &self.fats[2]
    }

    /// Forward returning the per-group outputs of the last FAT block.
    pub fn forward_captured(&self, x: &Tensor<E>) -> Result<(Tensor<E>, Vec<Tensor<E>>)> {
        let (y, caps) = self.forward_inner(x)?;
        Ok((y, caps))
    }

    fn forward_inner(&self, x: &Tensor<E>) -> Result<(Tensor<E>, Vec<Tensor<E>>)> {
        let h = self.rbs[0].forward(x)?;
        let h = self.rbs[1].forward(&h)?;
        let h = self.fats[0].forward(&h)?;
        let h = self.rbs[2].forward(&h)?;
        let h = self.fats[1].forward(&h)?;
        let h = self.rbs[3].forward(&h)?;
        self.fats[2].forward_captured(&h)
    }

    pub fn parameters(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        for (i, r) in self.rbs.iter().enumerate() {
            r.parameters(&format!("{prefix}.rbs{i}"), out);
        }
        for (i, f) in self.fats.iter().enumerate() {
            f.parameters(&format!("{prefix}.fat{i}"), out);
        }
    }
}

/// Latent -> image synthesis transform.
pub struct SynthesisTransform<E: Element> {
    fats: [FatPair<E>; 3],
    rbu: [Rbu<E>; 4],
}

impl<E: Element> SynthesisTransform<E> {
    pub fn new<R: Rng>(cfg: &TransformConfig, rng: &mut R) -> Result<Self> {
        let [c1, c2, c3] = cfg.channels;
        Ok(SynthesisTransform {
            fats: [
                FatPair::new(
                    cfg.latent,
                    cfg.heads[2],
                    cfg.s,
                    cfg.expansion,
                    cfg.attn_bias,
                    rng,
                )?,
                FatPair::new(c3, cfg.heads[1], cfg.s, cfg.expansion, cfg.attn_bias, rng)?,
                FatPair::new(c2, cfg.heads[0], cfg.s, cfg.expansion, cfg.attn_bias, rng)?,
            ],
            rbu: [
                Rbu::new(cfg.latent, c3, true, rng),
                Rbu::new(c3, c2, true, rng),
                Rbu::new(c2, c1, true, rng),
                Rbu::new(c1, 3, false, rng),
            ],
        })
    }

    pub fn forward(&self, y: &Tensor<E>) -> Result<Tensor<E>> {
        let h = self.forward_to_last_fat(y)?.0;
        let h = self.rbu[2].forward(&h)?;
        self.rbu[3].forward(&h)
    }

    /// The FAT pair closest to the latent (the first one).
    pub fn deepest_fat(&self) -> &FatPair<E> {
        &self.fats[0]
    }

    /// Forward returning the per-group outputs of the first FAT block (the
    /// deepest features on the synthesis side).
    pub fn forward_captured(&self, y: &Tensor<E>) -> Result<(Tensor<E>, Vec<Tensor<E>>)> {
        let (h, caps) = self.forward_to_last_fat(y)?;
        let h = self.rbu[2].forward(&h)?;
        Ok((self.rbu[3].forward(&h)?, caps))
    }

    fn forward_to_last_fat(&self, y: &Tensor<E>) -> Result<(Tensor<E>, Vec<Tensor<E>>)> {
        let (h, caps) = self.fats[0].forward_captured(y)?;
        let h = self.rbu[0].forward(&h)?;
        let h = self.fats[1].forward(&h)?;
        let h = self.rbu[1].forward(&h)?;
        let h = self.fats[2].forward(&h)?;
        Ok((h, caps))
    }

    pub fn parameters(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        for (i, f) in self.fats.iter().enumerate() {
            f.parameters(&format!("{prefix}.fat{i}"), out);
        }
        for (i, r) in self.rbu.iter().enumerate() {
            r.parameters(&format!("{prefix}.rbu{i}"), out);
        }
    }
}

/// Latent -> hyper latent (4x spatial reduction).
pub struct HyperAnalysis<E: Element> {
    conv_in: ConvLayer<E>,
    fat: FatPair<E>,
    rbs: [Rbs<E>; 2],
}

impl<E: Element> HyperAnalysis<E> {
    pub fn new<R: Rng>(cfg: &TransformConfig, rng: &mut R) -> Result<Self> {
        let n = cfg.hyper;
        Ok(HyperAnalysis {
            conv_in: ConvLayer::new(cfg.latent, n, 3, 1, 1, 1, rng),
            fat: FatPair::new(
                n,
                cfg.hyper_heads,
                cfg.hyper_s,
                cfg.expansion,
                cfg.attn_bias,
                rng,
            )?,
            rbs: [Rbs::new(n, n, rng), Rbs::new(n, n, rng)],
        })
    }

    pub fn forward(&self, y: &Tensor<E>) -> Result<Tensor<E>> {
        let h = self
            .conv_in
            .forward(y)?
            .leaky_relu(E::from_f64(LEAKY_SLOPE));
        let h = self.fat.forward(&h)?;
        let h = self.rbs[0].forward(&h)?;
        self.rbs[1].forward(&h)
    }

    pub fn parameters(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        self.conv_in.parameters(&format!("{prefix}.conv_in"), out);
        self.fat.parameters(&format!("{prefix}.fat"), out);
        for (i, r) in self.rbs.iter().enumerate() {
            r.parameters(&format!("{prefix}.rbs{i}"), out);
        }
    }
}

/// Hyper latent -> entropy context (2M channels at latent resolution).
pub struct HyperSynthesis<E: Element> {
    rbu: [Rbu<E>; 2],
    fat: FatPair<E>,
    conv_out: ConvLayer<E>,
}

impl<E: Element> HyperSynthesis<E> {
    pub fn new<R: Rng>(cfg: &TransformConfig, rng: &mut R) -> Result<Self> {
        let n = cfg.hyper;
        Ok(HyperSynthesis {
            rbu: [Rbu::new(n, n, true, rng), Rbu::new(n, n, true, rng)],
            fat: FatPair::new(
                n,
                cfg.hyper_heads,
                cfg.hyper_s,
                cfg.expansion,
                cfg.attn_bias,
                rng,
            )?,
            conv_out: ConvLayer::new(n, 2 * cfg.latent, 3, 1, 1, 1, rng),
        })
    }

    pub fn forward(&self, z: &Tensor<E>) -> Result<Tensor<E>> {
        let h = self.rbu[0].forward(z)?;
        let h = self.rbu[1].forward(&h)?;
        let h = self.fat.forward(&h)?;
        self.conv_out.forward(&h)
    }

    pub fn parameters(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        for (i, r) in self.rbu.iter().enumerate() {
            r.parameters(&format!("{prefix}.rbu{i}"), out);
        }
        self.fat.parameters(&format!("{prefix}.fat"), out);
        self.conv_out.parameters(&format!("{prefix}.conv_out"), out);
    }
}

/// Reflect-pads the bottom and right so both extents become multiples of `m`.
/// Inference-only (no gradient).
pub fn pad_to_multiple<E: Element>(x: &Tensor<E>, m: usize) -> Result<Tensor<E>> {
    let sh = x.shape();
    if sh.len() != 3 {
        return Err(Error::Dim(format!("pad_to_multiple expects [C,H,W], got {sh:?}")));
    }
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    let ph = (m - h % m) % m;
    let pw = (m - w % m) % m;
    if ph == 0 && pw == 0 {
        return Ok(x.clone());
    }
    if ph >= h || pw >= w {
        return Err(Error::Dim(format!(
            "pad_to_multiple: image {h}x{w} too small to reflect-pad to multiple of {m}"
        )));
    }
    let (nh, nw) = (h + ph, w + pw);
    let src = x.data();
    let mut data = vec![E::zero(); c * nh * nw];
    for ch in 0..c {
        for y in 0..nh {
            let sy = if y < h { y } else { 2 * h - 2 - y };
            for xv in 0..nw {
                let sx = if xv < w { xv } else { 2 * w - 2 - xv };
                data[ch * nh * nw + y * nw + xv] = src[ch * h * w + sy * w + sx];
            }
        }
    }
    Ok(Tensor::new(data, &[c, nh, nw]))
}
