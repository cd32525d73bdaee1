//! Grouped 2-D convolution (cross-correlation) with reverse-mode gradients.

use super::{Element, Tensor};
use crate::error::{Error, Result};
use crate::parallel::for_each_chunk_mut;

/// Grouped cross-correlation.
///
/// `x`: [Cin, H, W], `w`: [Cout, Cin/groups, kh, kw], optional bias [Cout].
/// Zero padding `pad` on all four sides; output spatial extent is
/// `(H + 2*pad - kh) / stride + 1`.
pub fn conv2d<E: Element>(
    x: &Tensor<E>,
    w: &Tensor<E>,
    bias: Option<&Tensor<E>>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Result<Tensor<E>> {
    if x.shape().len() != 3 || w.shape().len() != 4 {
        return Err(Error::Dim(format!(
            "conv2d expects x [C,H,W] and w [Cout,Cin/g,kh,kw], got {:?} and {:?}",
            x.shape(),
            w.shape()
        )));
    }
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, cin_pg, kh, kw) = (w.shape()[0], w.shape()[1], w.shape()[2], w.shape()[3]);
    if groups == 0 || cin % groups != 0 || cout % groups != 0 {
        return Err(Error::Config(format!(
            "conv2d: channels ({cin} in, {cout} out) not divisible by groups {groups}"
        )));
    }
    if cin / groups != cin_pg {
        return Err(Error::Config(format!(
            "conv2d: weight expects {cin_pg} in-channels per group, input has {}",
            cin / groups
        )));
    }
    if h + 2 * pad < kh || wd + 2 * pad < kw {
        return Err(Error::Dim(format!(
            "conv2d: kernel {kh}x{kw} does not fit padded input {}x{}",
            h + 2 * pad,
            wd + 2 * pad
        )));
    }
    if let Some(b) = bias {
        if b.len() != cout {
            return Err(Error::Config("conv2d: bias length != out channels".into()));
        }
    }
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let cout_pg = cout / groups;

    let mut data = vec![E::zero(); cout * oh * ow];
    {
        let xs_guard = x.data();
        let ws_guard = w.data();
        let xs: &[E] = &xs_guard;
        let ws: &[E] = &ws_guard;
        let bs = bias.map(|b| b.data().clone());
        for_each_chunk_mut(&mut data, oh * ow, |co, out| {
            let g = co / cout_pg;
            if let Some(b) = &bs {
                out.fill(b[co]);
            }
            for ci_l in 0..cin_pg {
                let ci = g * cin_pg + ci_l;
                let xch = &xs[ci * h * wd..(ci + 1) * h * wd];
                let wch = &ws[(co * cin_pg + ci_l) * kh * kw..(co * cin_pg + ci_l + 1) * kh * kw];
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = E::zero();
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                acc += xch[iy as usize * wd + ix as usize] * wch[ky * kw + kx];
                            }
                        }
                        out[oy * ow + ox] += acc;
                    }
                }
            }
        });
    }

    let px = x.clone();
    let pw = w.clone();
    let pb = bias.cloned();
    let mut parents = vec![px.clone(), pw.clone()];
    if let Some(b) = &pb {
        parents.push(b.clone());
    }
    Ok(Tensor::from_op(data, &[cout, oh, ow], parents, move |g| {
        let xs = px.data().clone();
        let ws = pw.data().clone();
        if px.on_tape() {
            let mut gx = vec![E::zero(); cin * h * wd];
            for_each_chunk_mut(&mut gx, h * wd, |ci, out| {
                let grp = ci / cin_pg;
                let ci_l = ci % cin_pg;
                for co_l in 0..cout_pg {
                    let co = grp * cout_pg + co_l;
                    let gch = &g[co * oh * ow..(co + 1) * oh * ow];
                    let wch =
                        &ws[(co * cin_pg + ci_l) * kh * kw..(co * cin_pg + ci_l + 1) * kh * kw];
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let gv = gch[oy * ow + ox];
                            if gv == E::zero() {
                                continue;
                            }
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    out[iy as usize * wd + ix as usize] += gv * wch[ky * kw + kx];
                                }
                            }
                        }
                    }
                }
            });
            px.accumulate_grad(&gx);
        }
        if pw.on_tape() {
            let mut gw = vec![E::zero(); cout * cin_pg * kh * kw];
            for_each_chunk_mut(&mut gw, cin_pg * kh * kw, |co, out| {
                let grp = co / cout_pg;
                let gch = &g[co * oh * ow..(co + 1) * oh * ow];
                for ci_l in 0..cin_pg {
                    let ci = grp * cin_pg + ci_l;
                    let xch = &xs[ci * h * wd..(ci + 1) * h * wd];
                    for ky in 0..kh {
                        for kx in 0..kw {
                            let mut acc = E::zero();
                            for oy in 0..oh {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                if iy < 0 || iy >= h as isize {
                                    continue;
                                }
                                for ox in 0..ow {
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if ix < 0 || ix >= wd as isize {
                                        continue;
                                    }
                                    acc += gch[oy * ow + ox] * xch[iy as usize * wd + ix as usize];
                                }
                            }
                            out[ci_l * kh * kw + ky * kw + kx] += acc;
                        }
                    }
                }
            });
            pw.accumulate_grad(&gw);
        }
        if let Some(b) = &pb {
            if b.on_tape() {
                let mut gb = vec![E::zero(); cout];
                for (co, slot) in gb.iter_mut().enumerate() {
                    let mut acc = E::zero();
                    for &v in &g[co * oh * ow..(co + 1) * oh * ow] {
                        acc += v;
                    }
                    *slot = acc;
                }
                b.accumulate_grad(&gb);
            }
        }
    }))
}
