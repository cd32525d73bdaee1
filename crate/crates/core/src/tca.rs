//! Transformer-based channel-wise autoregressive entropy model.
//!
//! The latent is split into `n_slices` equal channel slices that are coded in
//! order. A learned pseudo slice plus the (quantized) slices are embedded by
//! grouped 1x1 convolutions into a token stream of `n_slices + 1` blocks.
//! Masked channel attention lets block `j` attend to blocks `0..=j` only, so
//! the output read from block `g` depends on slices strictly before `g`; that
//! output is the context used to predict slice `g`. The decoder can therefore
//! reproduce every prediction with not-yet-decoded slices zeroed and obtain
//! bitwise identical parameters.
//!
//! Attention operates per spatial location: tokens are channels, split across
//! heads so that each head sees a sub-band of every block. The entropy
//! parameter network merges the hyper context and the attention output,
//! interleaved per latent channel, through three slice-grouped 3x3
//! convolutions and emits mean, scale, and a latent residual term per latent
//! channel. Scales are clamped to [0.04, 256].

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{group_norm, Element, Tensor};
use crate::transforms::ConvLayer;

pub const SIGMA_MIN: f64 = 0.04;
pub const SIGMA_MAX: f64 = 256.0;
const GN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TcaConfig {
    /// Latent channels M.
    pub latent: usize,
    pub n_slices: usize,
    pub layers: usize,
    /// Embedding channels per latent channel.
    pub r: usize,
    pub heads: usize,
}

impl TcaConfig {
    pub fn full() -> Self {
        TcaConfig {
            latent: 320,
            n_slices: 5,
            layers: 12,
            r: 4,
            heads: 16,
        }
    }

    pub fn toy() -> Self {
        TcaConfig {
            latent: 40,
            n_slices: 5,
            layers: 2,
            r: 4,
            heads: 4,
        }
    }

    /// Latent channels per slice.
    pub fn slice_width(&self) -> usize {
        self.latent / self.n_slices
    }

    fn validate(&self) -> Result<()> {
        if self.n_slices == 0 || self.latent % self.n_slices != 0 {
            return Err(Error::Config(format!(
                "tca: latent {} not divisible by n_slices {}",
                self.latent, self.n_slices
            )));
        }
        let block = self.r * self.slice_width();
        if self.heads == 0 || block % self.heads != 0 {
            return Err(Error::Config(format!(
                "tca: block width {block} not divisible by heads {}",
                self.heads
            )));
        }
        if self.layers == 0 || self.r == 0 {
            return Err(Error::Config("tca: layers and r must be positive".into()));
        }
        Ok(())
    }
}

struct TcaLayer<E: Element> {
    gn1_g: Tensor<E>,
    gn1_b: Tensor<E>,
    wq: ConvLayer<E>,
    wk: ConvLayer<E>,
    wv: ConvLayer<E>,
    wo: ConvLayer<E>,
    gn2_g: Tensor<E>,
    gn2_b: Tensor<E>,
    ffn1: ConvLayer<E>,
    ffn2: ConvLayer<E>,
}

impl<E: Element> TcaLayer<E> {
    fn new<R: Rng>(stream: usize, groups: usize, rng: &mut R) -> Self {
        let proj = |rng: &mut R| ConvLayer::new(stream, stream, 1, 1, 0, groups, rng);
        TcaLayer {
            gn1_g: Tensor::full(&[stream], E::one()).tracked(),
            gn1_b: Tensor::zeros(&[stream]).tracked(),
            wq: proj(rng),
            wk: proj(rng),
            wv: proj(rng),
            wo: proj(rng),
            gn2_g: Tensor::full(&[stream], E::one()).tracked(),
            gn2_b: Tensor::zeros(&[stream]).tracked(),
            ffn1: ConvLayer::new(stream, 2 * stream, 1, 1, 0, groups, rng),
            ffn2: ConvLayer::new(2 * stream, stream, 1, 1, 0, groups, rng),
        }
    }

    fn parameters(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        out.push((format!("{prefix}.gn1.g"), self.gn1_g.clone()));
        out.push((format!("{prefix}.gn1.b"), self.gn1_b.clone()));
        self.wq.parameters(&format!("{prefix}.wq"), out);
        self.wk.parameters(&format!("{prefix}.wk"), out);
        self.wv.parameters(&format!("{prefix}.wv"), out);
        self.wo.parameters(&format!("{prefix}.wo"), out);
        out.push((format!("{prefix}.gn2.g"), self.gn2_g.clone()));
        out.push((format!("{prefix}.gn2.b"), self.gn2_b.clone()));
        self.ffn1.parameters(&format!("{prefix}.ffn1"), out);
        self.ffn2.parameters(&format!("{prefix}.ffn2"), out);
    }
}

/// The full entropy model: context transformer plus parameter network.
pub struct Tca<E: Element> {
    pub cfg: TcaConfig,
    /// Learned pseudo start slice, broadcast over space.
    pseudo: Tensor<E>,
    embed: ConvLayer<E>,
    layers: Vec<TcaLayer<E>>,
    ep1: ConvLayer<E>,
    ep2: ConvLayer<E>,
    ep3: ConvLayer<E>,
}

/// Mean, scale, and latent-residual term, each [M, H, W].
pub struct EntropyParams<E: Element> {
    pub mu: Tensor<E>,
    pub sigma: Tensor<E>,
    pub lrp: Tensor<E>,
}

impl<E: Element> Tca<E> {
    pub fn new<R: Rng>(cfg: &TcaConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        let ms = cfg.slice_width();
        let blocks = cfg.n_slices + 1;
        let stream = blocks * cfg.r * ms;
        let m = cfg.latent;
        let ep_in = (2 + cfg.r) * m;
        let ep3 = ConvLayer::new(3 * m, 3 * m, 3, 1, 1, cfg.n_slices, rng);
        // Zero-init final stage: a freshly attached model predicts mean 0,
        // scale 1, and no latent residual.
        for v in ep3.w.data_mut().iter_mut() {
            *v = E::zero();
        }
        Ok(Tca {
            cfg: cfg.clone(),
            pseudo: Tensor::zeros(&[ms]).tracked(),
            embed: ConvLayer::new(blocks * ms, stream, 1, 1, 0, blocks, rng),
            layers: (0..cfg.layers)
                .map(|_| TcaLayer::new(stream, blocks, rng))
                .collect(),
            ep1: ConvLayer::new(ep_in, 3 * m, 3, 1, 1, cfg.n_slices, rng),
            ep2: ConvLayer::new(3 * m, 3 * m, 3, 1, 1, cfg.n_slices, rng),
            ep3,
        })
    }

    /// Block-inclusive causal mask over one head's token row.
    fn causal_mask(&self) -> Vec<bool> {
        let cpb = self.cfg.r * self.cfg.slice_width() / self.cfg.heads;
        let t = (self.cfg.n_slices + 1) * cpb;
        let mut mask = vec![false; t * t];
        for q in 0..t {
            for k in 0..t {
                mask[q * t + k] = k / cpb <= q / cpb;
            }
        }
        mask
    }

    /// Autoregressive context from the quantized latent: [r*M, H, W], where
    /// channel group `g` (width r*M/n_slices) depends only on slices `< g`.
    pub fn context(&self, y_hat: &Tensor<E>) -> Result<Tensor<E>> {
        let sh = y_hat.shape();
        if sh.len() != 3 || sh[0] != self.cfg.latent {
            return Err(Error::Dim(format!(
                "tca: expected latent [{}, H, W], got {sh:?}",
                self.cfg.latent
            )));
        }
        let (h, w) = (sh[1], sh[2]);
        let ms = self.cfg.slice_width();
        let blocks = self.cfg.n_slices + 1;
        let rms = self.cfg.r * ms;
        let stream = blocks * rms;
        let heads = self.cfg.heads;
        let cpb = rms / heads;
        let t = blocks * cpb;
        let hw = h * w;

        let start = self.pseudo.broadcast_hw(h, w);
        let tokens = Tensor::concat(&[start, y_hat.clone()], 0);
        let mut x = self.embed.forward(&tokens)?;
        let mask = self.causal_mask();
        let eps = E::from_f64(GN_EPS);
        let scale = E::one();

        for layer in &self.layers {
            let n1 = group_norm(&x, blocks, &layer.gn1_g, &layer.gn1_b, eps)?;
            let to_heads = |p: Tensor<E>| {
                p.reshape(&[blocks, heads, cpb, hw])
                    .permute(&[3, 1, 0, 2])
                    .reshape(&[hw * heads, t, 1])
            };
            let q = to_heads(layer.wq.forward(&n1)?);
            let k = to_heads(layer.wk.forward(&n1)?);
            let v = to_heads(layer.wv.forward(&n1)?);
            let logits = q.bmm(&k.permute(&[0, 2, 1]))?.scale(scale);
            let attn = logits.masked_softmax_last(Some(&mask));
            let ctx = attn
                .bmm(&v)?
                .reshape(&[hw, heads, blocks, cpb])
                .permute(&[2, 1, 3, 0])
                .reshape(&[stream, h, w]);
            x = x.add(&layer.wo.forward(&ctx)?);
            let n2 = group_norm(&x, blocks, &layer.gn2_g, &layer.gn2_b, eps)?;
            let f = layer.ffn1.forward(&n2)?.gelu();
            x = x.add(&layer.ffn2.forward(&f)?);
        }
        // Shifted readout: blocks 0..n_slices predict slices 0..n_slices.
        Ok(x.slice_axis(0, 0, self.cfg.n_slices * rms))
    }

    /// Entropy parameters from hyper context `phi` [2M, H, W] and the
    /// quantized latent.
    pub fn params(&self, phi: &Tensor<E>, y_hat: &Tensor<E>) -> Result<EntropyParams<E>> {
        let m = self.cfg.latent;
        let sh = phi.shape();
        if sh.len() != 3 || sh[0] != 2 * m {
            return Err(Error::Dim(format!(
                "tca: expected hyper context [{}, H, W], got {sh:?}",
                2 * m
            )));
        }
        let (h, w) = (sh[1], sh[2]);
        let ctx = self.context(y_hat)?;
        let hw = h * w;
        let r = self.cfg.r;
        // Interleave per latent channel: [phi_m (2), ctx_m (r)].
        let phi_r = phi.reshape(&[m, 2, hw]);
        let ctx_r = ctx.reshape(&[m, r, hw]);
        let merged = Tensor::concat(&[phi_r, ctx_r], 1).reshape(&[(2 + r) * m, h, w]);
        let p = self.ep1.forward(&merged)?.gelu();
        let p = self.ep2.forward(&p)?.gelu();
        let p = self.ep3.forward(&p)?;
        // Each slice group holds [mu, sigma, lrp] sub-blocks.
        let ns = self.cfg.n_slices;
        let ms = self.cfg.slice_width();
        let grouped = p.reshape(&[ns, 3, ms * hw]);
        let pick = |i: usize| grouped.slice_axis(1, i, 1).reshape(&[m, h, w]);
        let mu = pick(0);
        let sigma = pick(1)
            .clamp(
                E::from_f64(SIGMA_MIN.ln()),
                E::from_f64(SIGMA_MAX.ln()),
            )
            .exp();
        let lrp = pick(2);
        Ok(EntropyParams { mu, sigma, lrp })
    }

    pub fn parameters(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        out.push((format!("{prefix}.pseudo"), self.pseudo.clone()));
        self.embed.parameters(&format!("{prefix}.embed"), out);
        for (i, l) in self.layers.iter().enumerate() {
            l.parameters(&format!("{prefix}.layer{i}"), out);
        }
        self.ep1.parameters(&format!("{prefix}.ep1"), out);
        self.ep2.parameters(&format!("{prefix}.ep2"), out);
        self.ep3.parameters(&format!("{prefix}.ep3"), out);
    }
}

/// Adds the bounded latent residual correction to a quantized latent.
pub fn apply_latent_residual<E: Element>(y_hat: &Tensor<E>, lrp: &Tensor<E>) -> Tensor<E> {
    y_hat.add(&lrp.tanh().scale(E::from_f64(0.5)))
}

/// Zeroes latent slices `from..` (channel groups of width M/n_slices),
/// mirroring what the decoder knows before coding slice `from`.
pub fn zero_slices_from<E: Element>(y_hat: &Tensor<E>, cfg: &TcaConfig, from: usize) -> Tensor<E> {
    let ms = cfg.slice_width();
    let sh = y_hat.shape();
    let mut data = y_hat.to_vec();
    let plane = sh[1] * sh[2];
    for v in data[from * ms * plane..].iter_mut() {
        *v = E::zero();
    }
    Tensor::new(data, sh)
}
