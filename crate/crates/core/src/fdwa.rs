//! Frequency-decomposition window attention.
//!
//! Multi-head self-attention whose heads are split into four equal groups,
//! each attending within rectangular windows of a different shape. For a
//! scale factor `s` the shapes are: square 4s x 4s (low-frequency detail),
//! square s x s (high-frequency detail), wide s x 4s (horizontally low,
//! vertically high), and tall 4s x s (the transpose). Alternating blocks run
//! a shifted variant that cyclically rolls the feature map by half a window
//! before partitioning, so information crosses window borders.
//!
//! Window partition and merge are exact inverses built from reshape and
//! permute, so gradients flow through untouched. Features whose spatial
//! extent is not a multiple of the window are zero-padded on the bottom and
//! right for the duration of the block and cropped afterwards.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// The four window shapes, one per head group.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WindowKind {
    /// 4s x 4s square.
    LowLow,
    /// s x s square.
    HighHigh,
    /// s high, 4s wide.
    HighLow,
    /// 4s high, s wide.
    LowHigh,
}

/// Group order; also the channel order of the concatenated head outputs.
pub const WINDOW_KINDS: [WindowKind; 4] = [
    WindowKind::LowLow,
    WindowKind::HighHigh,
    WindowKind::HighLow,
    WindowKind::LowHigh,
];

impl WindowKind {
    /// Window extent (height, width) at scale `s`.
    pub fn extents(self, s: usize) -> (usize, usize) {
        match self {
            WindowKind::LowLow => (4 * s, 4 * s),
            WindowKind::HighHigh => (s, s),
            WindowKind::HighLow => (s, 4 * s),
            WindowKind::LowHigh => (4 * s, s),
        }
    }
}

/// Projections and position bias for one head group.
pub struct FdwaGroup<E: Element> {
    /// [C, C/4] combined per-head query projection.
    pub w_q: Tensor<E>,
    /// [C, C/4]
    pub w_k: Tensor<E>,
    /// [C, C/4]
    pub w_v: Tensor<E>,
    /// [(2wh-1)(2ww-1), heads/4] learned relative position bias table.
    pub bias: Option<Tensor<E>>,
}

/// Parameters of one FDWA layer.
pub struct FdwaParams<E: Element> {
    pub channels: usize,
    pub heads: usize,
    pub s: usize,
    /// One group per entry of [`WINDOW_KINDS`].
    pub groups: Vec<FdwaGroup<E>>,
    /// [C, C] output projection applied to the concatenated group outputs.
    pub w_o: Tensor<E>,
    /// [C]
    pub w_o_bias: Tensor<E>,
}

impl<E: Element> FdwaParams<E> {
    pub fn new<R: Rng>(
        channels: usize,
        heads: usize,
        s: usize,
        use_bias: bool,
        rng: &mut R,
    ) -> Result<Self> {
        if heads == 0 || heads % 4 != 0 {
            return Err(Error::Config(format!(
                "fdwa: heads ({heads}) must be a positive multiple of 4"
            )));
        }
        if channels % heads != 0 {
            return Err(Error::Config(format!(
                "fdwa: channels ({channels}) not divisible by heads ({heads})"
            )));
        }
        if s == 0 {
            return Err(Error::Config("fdwa: scale s must be positive".into()));
        }
        let std = 1.0 / (channels as f64).sqrt();
        let groups = WINDOW_KINDS
            .iter()
            .map(|&kind| {
                let (wh, ww) = kind.extents(s);
                let table_rows = (2 * wh - 1) * (2 * ww - 1);
                FdwaGroup {
                    w_q: Tensor::randn(&[channels, channels / 4], std, rng).tracked(),
                    w_k: Tensor::randn(&[channels, channels / 4], std, rng).tracked(),
                    w_v: Tensor::randn(&[channels, channels / 4], std, rng).tracked(),
                    bias: use_bias
                        .then(|| Tensor::zeros(&[table_rows, heads / 4]).tracked()),
                }
            })
            .collect();
        Ok(FdwaParams {
            channels,
            heads,
            s,
            groups,
            w_o: Tensor::randn(&[channels, channels], std, rng).tracked(),
            w_o_bias: Tensor::zeros(&[channels]).tracked(),
        })
    }

    pub fn parameters(&self) -> Vec<(&'static str, Tensor<E>)> {
        let mut out = Vec::new();
        let names: [[&'static str; 4]; 4] = [
            ["g0.w_q", "g0.w_k", "g0.w_v", "g0.bias"],
            ["g1.w_q", "g1.w_k", "g1.w_v", "g1.bias"],
            ["g2.w_q", "g2.w_k", "g2.w_v", "g2.bias"],
            ["g3.w_q", "g3.w_k", "g3.w_v", "g3.bias"],
        ];
        for (g, n) in self.groups.iter().zip(names.iter()) {
            out.push((n[0], g.w_q.clone()));
            out.push((n[1], g.w_k.clone()));
            out.push((n[2], g.w_v.clone()));
            if let Some(b) = &g.bias {
                out.push((n[3], b.clone()));
            }
        }
        out.push(("w_o", self.w_o.clone()));
        out.push(("w_o_bias", self.w_o_bias.clone()));
        out
    }
}

/// Splits `x` [C, H, W] into non-overlapping windows [M, C, wh, ww], windows
/// ordered row-major. H and W must be multiples of the window extents.
pub fn window_partition<E: Element>(x: &Tensor<E>, wh: usize, ww: usize) -> Result<Tensor<E>> {
    let (c, h, w) = spatial3(x)?;
    if h % wh != 0 || w % ww != 0 {
        return Err(Error::Dim(format!(
            "window_partition: {h}x{w} not a multiple of window {wh}x{ww}"
        )));
    }
    let (nh, nw) = (h / wh, w / ww);
    Ok(x
        .reshape(&[c, nh, wh, nw, ww])
        .permute(&[1, 3, 0, 2, 4])
        .reshape(&[nh * nw, c, wh, ww]))
}

/// Inverse of [`window_partition`].
pub fn window_merge<E: Element>(
    wins: &Tensor<E>,
    h: usize,
    w: usize,
) -> Result<Tensor<E>> {
    let sh = wins.shape();
    if sh.len() != 4 {
        return Err(Error::Dim(format!(
            "window_merge expects [M, C, wh, ww], got {sh:?}"
        )));
    }
    let (m, c, wh, ww) = (sh[0], sh[1], sh[2], sh[3]);
    if wh == 0 || ww == 0 || h % wh != 0 || w % ww != 0 || (h / wh) * (w / ww) != m {
        return Err(Error::Dim(format!(
            "window_merge: {m} windows of {wh}x{ww} do not tile {h}x{w}"
        )));
    }
    let (nh, nw) = (h / wh, w / ww);
    Ok(wins
        .reshape(&[nh, nw, c, wh, ww])
        .permute(&[2, 0, 3, 1, 4])
        .reshape(&[c, h, w]))
}

/// Relative position bias row index for every (query, key) pair in a window.
pub fn rel_pos_index(wh: usize, ww: usize) -> Vec<usize> {
    let t = wh * ww;
    let mut idx = Vec::with_capacity(t * t);
    for qi in 0..t {
        let (qy, qx) = (qi / ww, qi % ww);
        for ki in 0..t {
            let (ky, kx) = (ki / ww, ki % ww);
            let dy = qy as isize - ky as isize + (wh as isize - 1);
            let dx = qx as isize - kx as isize + (ww as isize - 1);
            idx.push(dy as usize * (2 * ww - 1) + dx as usize);
        }
    }
    idx
}

fn spatial3<E: Element>(x: &Tensor<E>) -> Result<(usize, usize, usize)> {
    let sh = x.shape();
    if sh.len() != 3 {
        return Err(Error::Dim(format!("expected [C, H, W], got {sh:?}")));
    }
    Ok((sh[0], sh[1], sh[2]))
}

/// Multi-head attention within each window.
///
/// `tokens`: [M, T, C]; the group's `heads_pg` heads each use C/heads key
/// dimensions; output is [M, T, C/4].
fn window_attention<E: Element>(
    tokens: &Tensor<E>,
    group: &FdwaGroup<E>,
    heads_pg: usize,
    d_k: usize,
    bias_idx: &[usize],
) -> Result<Tensor<E>> {
    let (m, t, c) = (tokens.shape()[0], tokens.shape()[1], tokens.shape()[2]);
    let flat = tokens.reshape(&[m * t, c]);
    let split_heads = |p: &Tensor<E>| -> Result<Tensor<E>> {
        Ok(flat
            .matmul(p)?
            .reshape(&[m, t, heads_pg, d_k])
            .permute(&[0, 2, 1, 3])
            .reshape(&[m * heads_pg, t, d_k]))
    };
    let q = split_heads(&group.w_q)?;
    let k = split_heads(&group.w_k)?;
    let v = split_heads(&group.w_v)?;

    let scale = E::from_f64(1.0 / (d_k as f64).sqrt());
    let mut logits = q.bmm(&k.permute(&[0, 2, 1]))?.scale(scale);
    if let Some(table) = &group.bias {
        let bias = table
            .gather_rows(bias_idx)
            .permute(&[1, 0])
            .reshape(&[heads_pg, t, t])
            .tile_leading(m)
            .reshape(&[m * heads_pg, t, t]);
        logits = logits.add(&bias);
    }
    let attn = logits.softmax_last();
    Ok(attn
        .bmm(&v)?
        .reshape(&[m, heads_pg, t, d_k])
        .permute(&[0, 2, 1, 3])
        .reshape(&[m, t, heads_pg * d_k]))
}

/// FDWA forward pass. `shifted` selects the half-window cyclic shift variant.
pub fn fdwa_forward<E: Element>(
    x: &Tensor<E>,
    params: &FdwaParams<E>,
    shifted: bool,
) -> Result<Tensor<E>> {
    fdwa_forward_inner(x, params, shifted, None)
}

/// Like [`fdwa_forward`], but also returns the per-group spatial outputs
/// before the output projection, in [`WINDOW_KINDS`] order. Used by the
/// spectrum analysis export.
pub fn fdwa_forward_captured<E: Element>(
    x: &Tensor<E>,
    params: &FdwaParams<E>,
    shifted: bool,
) -> Result<(Tensor<E>, Vec<Tensor<E>>)> {
    let mut cap = Vec::with_capacity(4);
    let out = fdwa_forward_inner(x, params, shifted, Some(&mut cap))?;
    Ok((out, cap))
}

fn fdwa_forward_inner<E: Element>(
    x: &Tensor<E>,
    params: &FdwaParams<E>,
    shifted: bool,
    mut capture: Option<&mut Vec<Tensor<E>>>,
) -> Result<Tensor<E>> {
    let (c, h, w) = spatial3(x)?;
    if c != params.channels {
        return Err(Error::Dim(format!(
            "fdwa: input has {c} channels, params expect {}",
            params.channels
        )));
    }
    let heads_pg = params.heads / 4;
    let d_k = c / params.heads;

    let mut group_outs = Vec::with_capacity(4);
    for (gi, kind) in WINDOW_KINDS.iter().enumerate() {
        let (wh, ww) = kind.extents(params.s);
        let ph = (wh - h % wh) % wh;
        let pw = (ww - w % ww) % ww;
        let mut feat = if ph > 0 || pw > 0 {
            x.pad2d_zero(0, ph, 0, pw)
        } else {
            x.clone()
        };
        let (hp, wp) = (h + ph, w + pw);
        let (sy, sx) = (wh / 2, ww / 2);
        if shifted && (sy > 0 || sx > 0) {
            feat = feat.roll2d(-(sy as isize), -(sx as isize));
        }
        let wins = window_partition(&feat, wh, ww)?;
        let m = wins.shape()[0];
        let t = wh * ww;
        let tokens = wins.reshape(&[m, c, t]).permute(&[0, 2, 1]);
        let idx = rel_pos_index(wh, ww);
        let out = window_attention(&tokens, &params.groups[gi], heads_pg, d_k, &idx)?;
        let mut spatial = window_merge(
            &out.permute(&[0, 2, 1]).reshape(&[m, c / 4, wh, ww]),
            hp,
            wp,
        )?;
        if shifted && (sy > 0 || sx > 0) {
            spatial = spatial.roll2d(sy as isize, sx as isize);
        }
        if ph > 0 || pw > 0 {
            spatial = spatial.crop2d(0, 0, h, w);
        }
        if let Some(cap) = capture.as_deref_mut() {
            cap.push(spatial.clone());
        }
        group_outs.push(spatial);
    }

    let cat = Tensor::concat(&group_outs, 0);
    let projected = cat
        .reshape(&[c, h * w])
        .permute(&[1, 0])
        .matmul(&params.w_o)?
        .permute(&[1, 0])
        .add_channel_bias(&params.w_o_bias);
    Ok(projected.reshape(&[c, h, w]))
}
