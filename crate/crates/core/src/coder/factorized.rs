//! Per-channel non-parametric prior for the hyper latent.
//!
//! Each channel owns a small monotone network modeling the cumulative
//! distribution: three layers `x -> softplus(H) x + b`, the first two
//! followed by `x + tanh(a) * tanh(x)`, the last by a sigmoid. Softplus keeps
//! the weights positive and `tanh(a) > -1` keeps the elementwise stage
//! strictly increasing, so the output is a valid CDF in (0, 1).
//!
//! Training uses the differentiable tensor path; coding builds quantized
//! tables from an equivalent plain-`f64` evaluation over the integer range
//! observed in the data (the range is stored in the bitstream, so encoder and
//! decoder build identical tables).

use rand::Rng;

use crate::coder::gaussian::CdfTable;
use crate::coder::range::PROB_SCALE;
use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

const FILTERS: usize = 3;

pub struct FactorizedPrior<E: Element> {
    pub channels: usize,
    /// [C, 3] first-layer weights (pre-softplus).
    h1: Tensor<E>,
    b1: Tensor<E>,
    a1: Tensor<E>,
    /// [C, 3, 3]
    h2: Tensor<E>,
    b2: Tensor<E>,
    a2: Tensor<E>,
    /// [C, 3]
    h3: Tensor<E>,
    /// [C]
    b3: Tensor<E>,
}

impl<E: Element> FactorizedPrior<E> {
    pub fn new<R: Rng>(channels: usize, rng: &mut R) -> Self {
        // softplus(0.5413) ~ 1, so the initial CDF is a spread-out sigmoid.
        let w0 = E::from_f64(0.5413);
        let f = FILTERS;
        FactorizedPrior {
            channels,
            h1: Tensor::full(&[channels, f], w0).tracked(),
            b1: Tensor::rand_uniform(&[channels, f], -1.0, 1.0, rng).tracked(),
            a1: Tensor::zeros(&[channels, f]).tracked(),
            h2: Tensor::full(&[channels, f, f], E::from_f64(-1.0)).tracked(),
            b2: Tensor::rand_uniform(&[channels, f], -1.0, 1.0, rng).tracked(),
            a2: Tensor::zeros(&[channels, f]).tracked(),
            h3: Tensor::full(&[channels, f], E::from_f64(-1.0)).tracked(),
            b3: Tensor::zeros(&[channels]).tracked(),
        }
    }

    /// CDF value at every element of `x` [C, H, W], per channel.
    pub fn cumulative(&self, x: &Tensor<E>) -> Result<Tensor<E>> {
        let sh = x.shape();
        if sh.len() != 3 || sh[0] != self.channels {
            return Err(Error::Dim(format!(
                "factorized prior: expected [{}, H, W], got {sh:?}",
                self.channels
            )));
        }
        let (h, w) = (sh[1], sh[2]);
        let hw = h * w;
        let f = FILTERS;
        let mut per_channel = Vec::with_capacity(self.channels);
        for c in 0..self.channels {
            let v = x.slice_axis(0, c, 1).reshape(&[1, hw]);
            let h1 = self.h1.slice_axis(0, c, 1).reshape(&[f, 1]).softplus();
            let b1 = self.b1.slice_axis(0, c, 1).reshape(&[f]);
            let a1 = self.a1.slice_axis(0, c, 1).reshape(&[f]).tanh();
            let l1 = h1.matmul(&v)?.add_col(&b1);
            let l1 = l1.add(&l1.tanh().mul_col(&a1));
            let h2 = self.h2.slice_axis(0, c, 1).reshape(&[f, f]).softplus();
            let b2 = self.b2.slice_axis(0, c, 1).reshape(&[f]);
            let a2 = self.a2.slice_axis(0, c, 1).reshape(&[f]).tanh();
            let l2 = h2.matmul(&l1)?.add_col(&b2);
            let l2 = l2.add(&l2.tanh().mul_col(&a2));
            let h3 = self.h3.slice_axis(0, c, 1).reshape(&[1, f]).softplus();
            let b3 = self.b3.slice_axis(0, c, 1);
            per_channel.push(h3.matmul(&l2)?.add_col(&b3).sigmoid());
        }
        Ok(Tensor::concat(&per_channel, 0).reshape(&[self.channels, h, w]))
    }

    /// Probability mass of a unit bin centered on each element, floored away
    /// from zero for stable log rates.
    pub fn likelihood(&self, z: &Tensor<E>) -> Result<Tensor<E>> {
        let half = E::from_f64(0.5);
        let upper = self.cumulative(&z.add_scalar(half))?;
        let lower = self.cumulative(&z.add_scalar(-half))?;
        Ok(upper.sub(&lower).clamp_min(E::from_f64(1e-9)))
    }

    /// Plain-f64 CDF evaluation for one channel, no tape.
    fn cumulative_f64(&self, c: usize, x: f64) -> f64 {
        let f = FILTERS;
        let sp = |v: f64| {
            if v > 20.0 {
                v
            } else {
                v.exp().ln_1p()
            }
        };
        let h1 = self.h1.data();
        let b1 = self.b1.data();
        let a1 = self.a1.data();
        let mut l1 = [0.0f64; FILTERS];
        for i in 0..f {
            let t = sp(h1[c * f + i].as_f64()) * x + b1[c * f + i].as_f64();
            l1[i] = t + a1[c * f + i].as_f64().tanh() * t.tanh();
        }
        let h2 = self.h2.data();
        let b2 = self.b2.data();
        let a2 = self.a2.data();
        let mut l2 = [0.0f64; FILTERS];
        for i in 0..f {
            let mut t = b2[c * f + i].as_f64();
            for j in 0..f {
                t += sp(h2[(c * f + i) * f + j].as_f64()) * l1[j];
            }
            l2[i] = t + a2[c * f + i].as_f64().tanh() * t.tanh();
        }
        let h3 = self.h3.data();
        let mut t = self.b3.data()[c].as_f64();
        for j in 0..f {
            t += sp(h3[c * f + j].as_f64()) * l2[j];
        }
        1.0 / (1.0 + (-t).exp())
    }

    /// Quantized coding table for integers `zmin..=zmax` of channel `c`.
    /// Deterministic in the parameters, so encoder and decoder agree.
    pub fn table(&self, c: usize, zmin: i64, zmax: i64) -> Result<CdfTable> {
        if c >= self.channels || zmin > zmax {
            return Err(Error::Config(format!(
                "factorized table: bad channel {c} or range [{zmin}, {zmax}]"
            )));
        }
        let span = (zmax - zmin + 1) as usize;
        let nsym = span + 1; // trailing escape keeps CdfTable's layout
        let f_lo = self.cumulative_f64(c, zmin as f64 - 0.5);
        let f_hi = self.cumulative_f64(c, zmax as f64 + 0.5);
        let denom = (f_hi - f_lo).max(1e-12);
        let scale = (PROB_SCALE - nsym as u32) as f64;
        let mut cdf = Vec::with_capacity(nsym + 1);
        cdf.push(0);
        for i in 1..=span {
            let b = ((self.cumulative_f64(c, (zmin + i as i64) as f64 - 0.5) - f_lo) / denom)
                .clamp(0.0, 1.0);
            cdf.push((b * scale).round() as u32 + i as u32);
        }
        cdf.push(PROB_SCALE);
        Ok(CdfTable { kmin: zmin, cdf })
    }

    pub fn parameters(&self, prefix: &str, out: &mut Vec<(String, Tensor<E>)>) {
        out.push((format!("{prefix}.h1"), self.h1.clone()));
        out.push((format!("{prefix}.b1"), self.b1.clone()));
        out.push((format!("{prefix}.a1"), self.a1.clone()));
        out.push((format!("{prefix}.h2"), self.h2.clone()));
        out.push((format!("{prefix}.b2"), self.b2.clone()));
        out.push((format!("{prefix}.a2"), self.a2.clone()));
        out.push((format!("{prefix}.h3"), self.h3.clone()));
        out.push((format!("{prefix}.b3"), self.b3.clone()));
    }
}
