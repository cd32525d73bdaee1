//! GroupNorm with affine parameters.

use super::{Element, Tensor};
use crate::error::{Error, Result};

/// Normalizes `x` ([C, ...]) per channel group to zero mean / unit variance,
/// then applies the per-channel affine `gamma`/`beta`.
pub fn group_norm<E: Element>(
    x: &Tensor<E>,
    n_groups: usize,
    gamma: &Tensor<E>,
    beta: &Tensor<E>,
    eps: E,
) -> Result<Tensor<E>> {
    let c = x.shape()[0];
    if n_groups == 0 || c % n_groups != 0 {
        return Err(Error::Config(format!(
            "group_norm: {c} channels not divisible by {n_groups} groups"
        )));
    }
    if gamma.len() != c || beta.len() != c {
        return Err(Error::Config("group_norm: affine parameter length != C".into()));
    }
    let inner = x.len() / c;
    let cpg = c / n_groups;
    let gsize = cpg * inner;

    let mut xhat = vec![E::zero(); x.len()];
    let mut inv_std = vec![E::zero(); n_groups];
    {
        let xs = x.data();
        for g in 0..n_groups {
            let seg = &xs[g * gsize..(g + 1) * gsize];
            let mut mean = E::zero();
            for &v in seg {
                mean += v;
            }
            mean = mean / E::from_f64(gsize as f64);
            let mut var = E::zero();
            for &v in seg {
                let d = v - mean;
                var += d * d;
            }
            var = var / E::from_f64(gsize as f64);
            let istd = E::one() / (var + eps).sqrt();
            inv_std[g] = istd;
            for (o, &v) in xhat[g * gsize..(g + 1) * gsize].iter_mut().zip(seg) {
                *o = (v - mean) * istd;
            }
        }
    }
    let mut data = xhat.clone();
    {
        let gm = gamma.data();
        let bt = beta.data();
        for ch in 0..c {
            let (gv, bv) = (gm[ch], bt[ch]);
            for v in &mut data[ch * inner..(ch + 1) * inner] {
                *v = *v * gv + bv;
            }
        }
    }

    let (px, pg, pb) = (x.clone(), gamma.clone(), beta.clone());
    let shape = x.shape().to_vec();
    Ok(Tensor::from_op(
        data,
        &shape,
        vec![px.clone(), pg.clone(), pb.clone()],
        move |g| {
            let gm = pg.data().clone();
            if pg.on_tape() {
                let mut ggm = vec![E::zero(); c];
                for (ch, slot) in ggm.iter_mut().enumerate() {
                    let mut acc = E::zero();
                    for i in 0..inner {
                        acc += g[ch * inner + i] * xhat[ch * inner + i];
                    }
                    *slot = acc;
                }
                pg.accumulate_grad(&ggm);
            }
            if pb.on_tape() {
                let mut gbt = vec![E::zero(); c];
                for (ch, slot) in gbt.iter_mut().enumerate() {
                    let mut acc = E::zero();
                    for i in 0..inner {
                        acc += g[ch * inner + i];
                    }
                    *slot = acc;
                }
                pb.accumulate_grad(&gbt);
            }
            if px.on_tape() {
                let n = E::from_f64(gsize as f64);
                let mut gx = vec![E::zero(); c * inner];
                for grp in 0..n_groups {
                    // d xhat = g * gamma (per channel)
                    let mut dxhat = vec![E::zero(); gsize];
                    for ch_l in 0..cpg {
                        let ch = grp * cpg + ch_l;
                        for i in 0..inner {
                            dxhat[ch_l * inner + i] = g[ch * inner + i] * gm[ch];
                        }
                    }
                    let xh = &xhat[grp * gsize..(grp + 1) * gsize];
                    let mut sum_d = E::zero();
                    let mut sum_dx = E::zero();
                    for i in 0..gsize {
                        sum_d += dxhat[i];
                        sum_dx += dxhat[i] * xh[i];
                    }
                    let istd = inv_std[grp];
                    for i in 0..gsize {
                        gx[grp * gsize + i] =
                            istd * (dxhat[i] - sum_d / n - xh[i] * sum_dx / n);
                    }
                }
                px.accumulate_grad(&gx);
            }
        },
    ))
}
