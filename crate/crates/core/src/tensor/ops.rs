//! Differentiable tensor operations.

use super::{strides, Element, Tensor};
use crate::error::{Error, Result};
use crate::parallel::for_each_chunk_mut;

// ── raw matmul kernels ───────────────────────────────────────────────

/// c[m,n] += a[m,k] * b[k,n], row-major.
pub(crate) fn mm<E: Element>(a: &[E], b: &[E], c: &mut [E], _m: usize, k: usize, n: usize) {
    for_each_chunk_mut(c, n, |i, row| {
        for p in 0..k {
            let av = a[i * k + p];
            if av != E::zero() {
                let brow = &b[p * n..(p + 1) * n];
                for (cv, bv) in row.iter_mut().zip(brow) {
                    *cv += av * *bv;
                }
            }
        }
    });
}

/// c[m,n] += a^T * b where a is [k,m].
pub(crate) fn mm_at<E: Element>(a: &[E], b: &[E], c: &mut [E], m: usize, k: usize, n: usize) {
    for_each_chunk_mut(c, n, |i, row| {
        for p in 0..k {
            let av = a[p * m + i];
            if av != E::zero() {
                let brow = &b[p * n..(p + 1) * n];
                for (cv, bv) in row.iter_mut().zip(brow) {
                    *cv += av * *bv;
                }
            }
        }
    });
}

/// c[m,n] += a * b^T where b is [n,k].
pub(crate) fn mm_bt<E: Element>(a: &[E], b: &[E], c: &mut [E], _m: usize, k: usize, n: usize) {
    
    for_each_chunk_mut(c, n, |i, row| {
        let arow = &a[i * k..(i + 1) * k];
        for (j, cv) in row.iter_mut().enumerate() {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = E::zero();
            for (av, bv) in arow.iter().zip(brow) {
                acc += *av * *bv;
            }
            *cv += acc;
        }
    });
}

impl<E: Element> Tensor<E> {
    // ── elementwise binary ───────────────────────────────────────────

    fn assert_same_shape(&self, other: &Tensor<E>, op: &str) {
        assert_eq!(
            self.shape(),
            other.shape(),
            "{op}: shape mismatch {:?} vs {:?}",
            self.shape(),
            other.shape()
        );
    }

    pub fn add(&self, other: &Tensor<E>) -> Tensor<E> {
        self.assert_same_shape(other, "add");
        let data = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(&x, &y)| x + y).collect()
        };
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::from_op(data, self.shape(), vec![pa.clone(), pb.clone()], move |g| {
            if pa.on_tape() {
                pa.accumulate_grad(g);
            }
            if pb.on_tape() {
                pb.accumulate_grad(g);
            }
        })
    }

    pub fn sub(&self, other: &Tensor<E>) -> Tensor<E> {
        self.assert_same_shape(other, "sub");
        let data = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(&x, &y)| x - y).collect()
        };
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::from_op(data, self.shape(), vec![pa.clone(), pb.clone()], move |g| {
            if pa.on_tape() {
                pa.accumulate_grad(g);
            }
            if pb.on_tape() {
                let neg: Vec<E> = g.iter().map(|&v| -v).collect();
                pb.accumulate_grad(&neg);
            }
        })
    }

    pub fn mul(&self, other: &Tensor<E>) -> Tensor<E> {
        self.assert_same_shape(other, "mul");
        let data = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(&x, &y)| x * y).collect()
        };
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::from_op(data, self.shape(), vec![pa.clone(), pb.clone()], move |g| {
            if pa.on_tape() {
                let b = pb.data();
                let ga: Vec<E> = g.iter().zip(b.iter()).map(|(&gv, &bv)| gv * bv).collect();
                drop(b);
                pa.accumulate_grad(&ga);
            }
            if pb.on_tape() {
                let a = pa.data();
                let gb: Vec<E> = g.iter().zip(a.iter()).map(|(&gv, &av)| gv * av).collect();
                drop(a);
                pb.accumulate_grad(&gb);
            }
        })
    }

    pub fn div(&self, other: &Tensor<E>) -> Tensor<E> {
        self.assert_same_shape(other, "div");
        let data = {
            let a = self.data();
            let b = other.data();
            a.iter().zip(b.iter()).map(|(&x, &y)| x / y).collect()
        };
        let (pa, pb) = (self.clone(), other.clone());
        Tensor::from_op(data, self.shape(), vec![pa.clone(), pb.clone()], move |g| {
            let b = pb.data().clone();
            if pa.on_tape() {
                let ga: Vec<E> = g.iter().zip(b.iter()).map(|(&gv, &bv)| gv / bv).collect();
                pa.accumulate_grad(&ga);
            }
            if pb.on_tape() {
                let a = pa.data();
                let gb: Vec<E> = g
                    .iter()
                    .zip(a.iter().zip(b.iter()))
                    .map(|(&gv, (&av, &bv))| -gv * av / (bv * bv))
                    .collect();
                drop(a);
                pb.accumulate_grad(&gb);
            }
        })
    }

    // ── unary ────────────────────────────────────────────────────────

    /// Generic unary op: `f` computes the value, `df` the local derivative
    /// given (input, output).
    fn unary(
        &self,
        f: impl Fn(E) -> E,
        df: impl Fn(E, E) -> E + 'static,
    ) -> Tensor<E> {
        let data: Vec<E> = self.data().iter().map(|&v| f(v)).collect();
        let out_vals = data.clone();
        let p = self.clone();
        Tensor::from_op(data, self.shape(), vec![p.clone()], move |g| {
            if p.on_tape() {
                let x = p.data();
                let gx: Vec<E> = g
                    .iter()
                    .zip(x.iter().zip(out_vals.iter()))
                    .map(|(&gv, (&xv, &yv))| gv * df(xv, yv))
                    .collect();
                drop(x);
                p.accumulate_grad(&gx);
            }
        })
    }

    pub fn neg(&self) -> Tensor<E> {
        self.unary(|v| -v, |_, _| -E::one())
    }

    pub fn scale(&self, c: E) -> Tensor<E> {
        self.unary(move |v| v * c, move |_, _| c)
    }

    pub fn add_scalar(&self, c: E) -> Tensor<E> {
        self.unary(move |v| v + c, |_, _| E::one())
    }

    pub fn exp(&self) -> Tensor<E> {
        self.unary(|v| v.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Tensor<E> {
        self.unary(|v| v.ln(), |x, _| E::one() / x)
    }

    pub fn tanh(&self) -> Tensor<E> {
        self.unary(|v| v.tanh(), |_, y| E::one() - y * y)
    }

    pub fn sigmoid(&self) -> Tensor<E> {
        self.unary(
            |v| E::one() / (E::one() + (-v).exp()),
            |_, y| y * (E::one() - y),
        )
    }

    pub fn softplus(&self) -> Tensor<E> {
        // ln(1+e^x), numerically stable split.
        self.unary(
            |v| {
                if v > E::zero() {
                    v + (E::one() + (-v).exp()).ln()
                } else {
                    (E::one() + v.exp()).ln()
                }
            },
            |x, _| E::one() / (E::one() + (-x).exp()),
        )
    }

    /// GELU with the exact erf formulation.
    pub fn gelu(&self) -> Tensor<E> {
        let half = E::from_f64(0.5);
        let inv_sqrt2 = E::from_f64(std::f64::consts::FRAC_1_SQRT_2);
        let inv_sqrt2pi = E::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
        self.unary(
            move |v| half * v * (E::one() + (v * inv_sqrt2).erf()),
            move |x, _| {
                let cdf = half * (E::one() + (x * inv_sqrt2).erf());
                let pdf = inv_sqrt2pi * (-half * x * x).exp();
                cdf + x * pdf
            },
        )
    }

    pub fn erf_op(&self) -> Tensor<E> {
        let c = E::from_f64(2.0 / std::f64::consts::PI.sqrt());
        self.unary(move |v| v.erf(), move |x, _| c * (-x * x).exp())
    }

    pub fn leaky_relu(&self, slope: E) -> Tensor<E> {
        self.unary(
            move |v| if v >= E::zero() { v } else { v * slope },
            move |x, _| if x >= E::zero() { E::one() } else { slope },
        )
    }

    /// Clamp; gradient is zero outside the bounds.
    pub fn clamp(&self, lo: E, hi: E) -> Tensor<E> {
        self.unary(
            move |v| v.max(lo).min(hi),
            move |x, _| {
                if x > lo && x < hi {
                    E::one()
                } else {
                    E::zero()
                }
            },
        )
    }

    pub fn clamp_min(&self, lo: E) -> Tensor<E> {
        self.unary(
            move |v| v.max(lo),
            move |x, _| if x > lo { E::one() } else { E::zero() },
        )
    }

    /// Straight-through rounding: forward is round-half-away-from-zero,
    /// backward passes the gradient unchanged.
    pub fn ste_round(&self) -> Tensor<E> {
        self.unary(|v| v.round(), |_, _| E::one())
    }

    // ── reductions ───────────────────────────────────────────────────

    pub fn sum_all(&self) -> Tensor<E> {
        let mut acc = E::zero();
        for &v in self.data().iter() {
            acc += v;
        }
        let p = self.clone();
        Tensor::from_op(vec![acc], &[1], vec![p.clone()], move |g| {
            if p.on_tape() {
                let gv = g[0];
                p.accumulate_grad(&vec![gv; p.len()]);
            }
        })
    }

    pub fn mean_all(&self) -> Tensor<E> {
        let n = E::from_f64(self.len() as f64);
        self.sum_all().scale(E::one() / n)
    }

    // ── movement ─────────────────────────────────────────────────────

    pub fn reshape(&self, shape: &[usize]) -> Tensor<E> {
        assert_eq!(
            self.len(),
            shape.iter().product::<usize>(),
            "reshape: element count mismatch {:?} -> {:?}",
            self.shape(),
            shape
        );
        let p = self.clone();
        Tensor::from_op(self.to_vec(), shape, vec![p.clone()], move |g| {
            if p.on_tape() {
                p.accumulate_grad(g);
            }
        })
    }

    /// General axis permutation; `axes[i]` names the source axis of output
    /// axis `i`.
    pub fn permute(&self, axes: &[usize]) -> Tensor<E> {
        let in_shape = self.shape().to_vec();
        assert_eq!(axes.len(), in_shape.len(), "permute: rank mismatch");
        let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
        let data = permute_data(&self.data(), &in_shape, axes);
        let p = self.clone();
        let axes_owned = axes.to_vec();
        Tensor::from_op(data, &out_shape, vec![p.clone()], move |g| {
            if p.on_tape() {
                // Inverse permutation.
                let mut inv = vec![0; axes_owned.len()];
                for (i, &a) in axes_owned.iter().enumerate() {
                    inv[a] = i;
                }
                let out_shape: Vec<usize> =
                    axes_owned.iter().map(|&a| p.shape()[a]).collect();
                let gx = permute_data(g, &out_shape, &inv);
                p.accumulate_grad(&gx);
            }
        })
    }

    /// Concatenation along `axis`.
    pub fn concat(parts: &[Tensor<E>], axis: usize) -> Tensor<E> {
        assert!(!parts.is_empty());
        let rank = parts[0].shape().len();
        let mut out_shape = parts[0].shape().to_vec();
        out_shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
        for p in parts {
            assert_eq!(p.shape().len(), rank, "concat: rank mismatch");
            for d in 0..rank {
                if d != axis {
                    assert_eq!(p.shape()[d], parts[0].shape()[d], "concat: shape mismatch");
                }
            }
        }
        let outer: usize = out_shape[..axis].iter().product();
        let inner: usize = out_shape[axis + 1..].iter().product();
        let total_ax = out_shape[axis];
        let mut data = vec![E::zero(); outer * total_ax * inner];
        let mut offset = 0;
        for p in parts {
            let ax = p.shape()[axis];
            let src = p.data();
            for o in 0..outer {
                let dst_base = (o * total_ax + offset) * inner;
                let src_base = o * ax * inner;
                data[dst_base..dst_base + ax * inner]
                    .copy_from_slice(&src[src_base..src_base + ax * inner]);
            }
            offset += ax;
        }
        let parents: Vec<Tensor<E>> = parts.to_vec();
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        let parents_b = parents.clone();
        Tensor::from_op(data, &out_shape, parents, move |g| {
            let mut offset = 0;
            for (p, &ax) in parents_b.iter().zip(sizes.iter()) {
                if p.on_tape() {
                    let mut gp = vec![E::zero(); p.len()];
                    for o in 0..outer {
                        let src_base = (o * total_ax + offset) * inner;
                        let dst_base = o * ax * inner;
                        gp[dst_base..dst_base + ax * inner]
                            .copy_from_slice(&g[src_base..src_base + ax * inner]);
                    }
                    p.accumulate_grad(&gp);
                }
                offset += ax;
            }
        })
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Tensor<E> {
        let in_shape = self.shape().to_vec();
        assert!(start + len <= in_shape[axis], "slice_axis out of range");
        let mut out_shape = in_shape.clone();
        out_shape[axis] = len;
        let outer: usize = in_shape[..axis].iter().product();
        let inner: usize = in_shape[axis + 1..].iter().product();
        let total_ax = in_shape[axis];
        let mut data = vec![E::zero(); outer * len * inner];
        {
            let src = self.data();
            for o in 0..outer {
                let src_base = (o * total_ax + start) * inner;
                let dst_base = o * len * inner;
                data[dst_base..dst_base + len * inner]
                    .copy_from_slice(&src[src_base..src_base + len * inner]);
            }
        }
        let p = self.clone();
        Tensor::from_op(data, &out_shape, vec![p.clone()], move |g| {
            if p.on_tape() {
                let mut gp = vec![E::zero(); p.len()];
                for o in 0..outer {
                    let dst_base = (o * total_ax + start) * inner;
                    let src_base = o * len * inner;
                    gp[dst_base..dst_base + len * inner]
                        .copy_from_slice(&g[src_base..src_base + len * inner]);
                }
                p.accumulate_grad(&gp);
            }
        })
    }

    /// Zero-pads the last two axes by (top, bottom, left, right).
    pub fn pad2d_zero(&self, top: usize, bottom: usize, left: usize, right: usize) -> Tensor<E> {
        let shape = self.shape().to_vec();
        let rank = shape.len();
        assert!(rank >= 2);
        let (h, w) = (shape[rank - 2], shape[rank - 1]);
        let (oh, ow) = (h + top + bottom, w + left + right);
        let lead: usize = shape[..rank - 2].iter().product();
        let mut out_shape = shape.clone();
        out_shape[rank - 2] = oh;
        out_shape[rank - 1] = ow;
        let mut data = vec![E::zero(); lead * oh * ow];
        {
            let src = self.data();
            for l in 0..lead {
                for r in 0..h {
                    let dst = l * oh * ow + (r + top) * ow + left;
                    let s = l * h * w + r * w;
                    data[dst..dst + w].copy_from_slice(&src[s..s + w]);
                }
            }
        }
        let p = self.clone();
        Tensor::from_op(data, &out_shape, vec![p.clone()], move |g| {
            if p.on_tape() {
                let mut gp = vec![E::zero(); lead * h * w];
                for l in 0..lead {
                    for r in 0..h {
                        let src = l * oh * ow + (r + top) * ow + left;
                        let d = l * h * w + r * w;
                        gp[d..d + w].copy_from_slice(&g[src..src + w]);
                    }
                }
                p.accumulate_grad(&gp);
            }
        })
    }

    /// Crops the last two axes to `[top, top+h) x [left, left+w)`.
    pub fn crop2d(&self, top: usize, left: usize, h: usize, w: usize) -> Tensor<E> {
        let shape = self.shape().to_vec();
        let rank = shape.len();
        let (ih, iw) = (shape[rank - 2], shape[rank - 1]);
        assert!(top + h <= ih && left + w <= iw, "crop2d out of range");
        let lead: usize = shape[..rank - 2].iter().product();
        let mut out_shape = shape.clone();
        out_shape[rank - 2] = h;
        out_shape[rank - 1] = w;
        let mut data = vec![E::zero(); lead * h * w];
        {
            let src = self.data();
            for l in 0..lead {
                for r in 0..h {
                    let s = l * ih * iw + (r + top) * iw + left;
                    let d = l * h * w + r * w;
                    data[d..d + w].copy_from_slice(&src[s..s + w]);
                }
            }
        }
        let p = self.clone();
        Tensor::from_op(data, &out_shape, vec![p.clone()], move |g| {
            if p.on_tape() {
                let mut gp = vec![E::zero(); lead * ih * iw];
                for l in 0..lead {
                    for r in 0..h {
                        let d = l * ih * iw + (r + top) * iw + left;
                        let s = l * h * w + r * w;
                        gp[d..d + w].copy_from_slice(&g[s..s + w]);
                    }
                }
                p.accumulate_grad(&gp);
            }
        })
    }

    /// Cyclic shift of the last two axes by (dy, dx); positive shifts move
    /// content down/right.
    pub fn roll2d(&self, dy: isize, dx: isize) -> Tensor<E> {
        let shape = self.shape().to_vec();
        let rank = shape.len();
        let (h, w) = (shape[rank - 2], shape[rank - 1]);
        let lead: usize = shape[..rank - 2].iter().product();
        let data = roll_data(&self.data(), lead, h, w, dy, dx);
        let p = self.clone();
        Tensor::from_op(data, &shape, vec![p.clone()], move |g| {
            if p.on_tape() {
                let gp = roll_data(g, lead, h, w, -dy, -dx);
                p.accumulate_grad(&gp);
            }
        })
    }

    /// Sub-pixel upsampling: [C*r*r, H, W] -> [C, H*r, W*r].
    pub fn pixel_shuffle(&self, r: usize) -> Tensor<E> {
        let shape = self.shape().to_vec();
        assert_eq!(shape.len(), 3, "pixel_shuffle expects [C*r*r, H, W]");
        let (cin, h, w) = (shape[0], shape[1], shape[2]);
        assert_eq!(cin % (r * r), 0, "pixel_shuffle: channels not divisible by r^2");
        let c = cin / (r * r);
        let (oh, ow) = (h * r, w * r);
        let mut data = vec![E::zero(); c * oh * ow];
        {
            let src = self.data();
            for ch in 0..c {
                for ry in 0..r {
                    for rx in 0..r {
                        let sc = ch * r * r + ry * r + rx;
                        for y in 0..h {
                            for x in 0..w {
                                data[ch * oh * ow + (y * r + ry) * ow + (x * r + rx)] =
                                    src[sc * h * w + y * w + x];
                            }
                        }
                    }
                }
            }
        }
        let p = self.clone();
        Tensor::from_op(data, &[c, oh, ow], vec![p.clone()], move |g| {
            if p.on_tape() {
                let mut gp = vec![E::zero(); cin * h * w];
                for ch in 0..c {
                    for ry in 0..r {
                        for rx in 0..r {
                            let sc = ch * r * r + ry * r + rx;
                            for y in 0..h {
                                for x in 0..w {
                                    gp[sc * h * w + y * w + x] =
                                        g[ch * oh * ow + (y * r + ry) * ow + (x * r + rx)];
                                }
                            }
                        }
                    }
                }
                p.accumulate_grad(&gp);
            }
        })
    }

    // ── broadcast helpers ────────────────────────────────────────────

    /// x[C, ...] + b[C], bias broadcast over trailing axes.
    pub fn add_channel_bias(&self, bias: &Tensor<E>) -> Tensor<E> {
        let c = self.shape()[0];
        assert_eq!(bias.len(), c, "add_channel_bias: channel mismatch");
        let inner = self.len() / c;
        let data = {
            let x = self.data();
            let b = bias.data();
            let mut out = x.clone();
            for ch in 0..c {
                let bv = b[ch];
                for v in &mut out[ch * inner..(ch + 1) * inner] {
                    *v += bv;
                }
            }
            out
        };
        let (px, pb) = (self.clone(), bias.clone());
        Tensor::from_op(data, self.shape(), vec![px.clone(), pb.clone()], move |g| {
            if px.on_tape() {
                px.accumulate_grad(g);
            }
            if pb.on_tape() {
                let mut gb = vec![E::zero(); c];
                for ch in 0..c {
                    let mut acc = E::zero();
                    for &v in &g[ch * inner..(ch + 1) * inner] {
                        acc += v;
                    }
                    gb[ch] = acc;
                }
                pb.accumulate_grad(&gb);
            }
        })
    }

    /// Broadcasts a [C] or [C,1,1] tensor to [C, h, w].
    pub fn broadcast_hw(&self, h: usize, w: usize) -> Tensor<E> {
        let c = self.shape()[0];
        assert_eq!(self.len(), c, "broadcast_hw: expected one value per channel");
        let mut data = vec![E::zero(); c * h * w];
        {
            let src = self.data();
            for ch in 0..c {
                data[ch * h * w..(ch + 1) * h * w].fill(src[ch]);
            }
        }
        let p = self.clone();
        Tensor::from_op(data, &[c, h, w], vec![p.clone()], move |g| {
            if p.on_tape() {
                let mut gp = vec![E::zero(); c];
                for ch in 0..c {
                    let mut acc = E::zero();
                    for &v in &g[ch * h * w..(ch + 1) * h * w] {
                        acc += v;
                    }
                    gp[ch] = acc;
                }
                p.accumulate_grad(&gp);
            }
        })
    }

    /// m[R, C] + v[R] broadcast over columns.
    pub fn add_col(&self, v: &Tensor<E>) -> Tensor<E> {
        self.add_channel_bias(v)
    }

    /// m[R, C] * v[R] broadcast over columns.
    pub fn mul_col(&self, v: &Tensor<E>) -> Tensor<E> {
        let r = self.shape()[0];
        assert_eq!(v.len(), r, "mul_col: row mismatch");
        let inner = self.len() / r;
        let data = {
            let x = self.data();
            let vv = v.data();
            let mut out = x.clone();
            for row in 0..r {
                let c = vv[row];
                for val in &mut out[row * inner..(row + 1) * inner] {
                    *val *= c;
                }
            }
            out
        };
        let (px, pv) = (self.clone(), v.clone());
        Tensor::from_op(data, self.shape(), vec![px.clone(), pv.clone()], move |g| {
            if px.on_tape() {
                let vv = pv.data();
                let mut gx = g.to_vec();
                for row in 0..r {
                    let c = vv[row];
                    for val in &mut gx[row * inner..(row + 1) * inner] {
                        *val *= c;
                    }
                }
                drop(vv);
                px.accumulate_grad(&gx);
            }
            if pv.on_tape() {
                let x = px.data();
                let mut gv = vec![E::zero(); r];
                for row in 0..r {
                    let mut acc = E::zero();
                    for i in 0..inner {
                        acc += g[row * inner + i] * x[row * inner + i];
                    }
                    gv[row] = acc;
                }
                drop(x);
                pv.accumulate_grad(&gv);
            }
        })
    }

    // ── matmul ───────────────────────────────────────────────────────

    /// Standard 2-D matrix product: [m,k] x [k,n] -> [m,n].
    pub fn matmul(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        if self.shape().len() != 2 || other.shape().len() != 2 {
            return Err(Error::Dim(format!(
                "matmul expects 2-D operands, got {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let (m, k) = (self.shape()[0], self.shape()[1]);
        let (k2, n) = (other.shape()[0], other.shape()[1]);
        if k != k2 {
            return Err(Error::Dim(format!(
                "matmul inner extents differ: {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut data = vec![E::zero(); m * n];
        mm(&self.data(), &other.data(), &mut data, m, k, n);
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            data,
            &[m, n],
            vec![pa.clone(), pb.clone()],
            move |g| {
                if pa.on_tape() {
                    let mut ga = vec![E::zero(); m * k];
                    mm_bt(g, &pb.data(), &mut ga, m, n, k);
                    pa.accumulate_grad(&ga);
                }
                if pb.on_tape() {
                    let mut gb = vec![E::zero(); k * n];
                    mm_at(&pa.data(), g, &mut gb, k, m, n);
                    pb.accumulate_grad(&gb);
                }
            },
        ))
    }

    /// Batched matmul: [B,m,k] x [B,k,n] -> [B,m,n].
    pub fn bmm(&self, other: &Tensor<E>) -> Result<Tensor<E>> {
        if self.shape().len() != 3 || other.shape().len() != 3 {
            return Err(Error::Dim("bmm expects 3-D operands".into()));
        }
        let (b, m, k) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (b2, k2, n) = (other.shape()[0], other.shape()[1], other.shape()[2]);
        if b != b2 || k != k2 {
            return Err(Error::Dim(format!(
                "bmm shape mismatch: {:?} x {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let mut data = vec![E::zero(); b * m * n];
        {
            let a_guard = self.data();
            let b_guard = other.data();
            let a: &[E] = &a_guard;
            let bb: &[E] = &b_guard;
            for_each_chunk_mut(&mut data, m * n, |i, c| {
                let ab = &a[i * m * k..(i + 1) * m * k];
                let bbb = &bb[i * k * n..(i + 1) * k * n];
                for row in 0..m {
                    for p in 0..k {
                        let av = ab[row * k + p];
                        if av != E::zero() {
                            for col in 0..n {
                                c[row * n + col] += av * bbb[p * n + col];
                            }
                        }
                    }
                }
            });
        }
        let (pa, pb) = (self.clone(), other.clone());
        Ok(Tensor::from_op(
            data,
            &[b, m, n],
            vec![pa.clone(), pb.clone()],
            move |g| {
                if pa.on_tape() {
                    let bb_guard = pb.data();
                    let bb: &[E] = &bb_guard;
                    let mut ga = vec![E::zero(); b * m * k];
                    for_each_chunk_mut(&mut ga, m * k, |i, c| {
                        mm_bt(
                            &g[i * m * n..(i + 1) * m * n],
                            &bb[i * k * n..(i + 1) * k * n],
                            c,
                            m,
                            n,
                            k,
                        );
                    });
                    drop(bb_guard);
                    pa.accumulate_grad(&ga);
                }
                if pb.on_tape() {
                    let a_guard = pa.data();
                    let a: &[E] = &a_guard;
                    let mut gb = vec![E::zero(); b * k * n];
                    for_each_chunk_mut(&mut gb, k * n, |i, c| {
                        mm_at(
                            &a[i * m * k..(i + 1) * m * k],
                            &g[i * m * n..(i + 1) * m * n],
                            c,
                            k,
                            m,
                            n,
                        );
                    });
                    drop(a_guard);
                    pb.accumulate_grad(&gb);
                }
            },
        ))
    }

    // ── softmax ──────────────────────────────────────────────────────

    /// Softmax over the last axis.
    pub fn softmax_last(&self) -> Tensor<E> {
        self.masked_softmax_last(None)
    }

    /// Softmax over the last axis with an optional keep-mask of shape equal
    /// to the trailing two axes `[rows_per_block, n]`, shared across leading
    /// axes. Masked-out positions get exactly zero weight and are excluded
    /// from the max and the normalizing sum.
    pub fn masked_softmax_last(&self, mask: Option<&[bool]>) -> Tensor<E> {
        let shape = self.shape().to_vec();
        let n = *shape.last().expect("softmax on 0-rank tensor");
        let _rows = self.len() / n;
        let mask_rows = mask.map(|m| {
            assert_eq!(m.len() % n, 0, "mask length not a multiple of row length");
            m.len() / n
        });
        let mut data = vec![E::zero(); self.len()];
        {
            let x_guard = self.data();
            let x: &[E] = &x_guard;
            for_each_chunk_mut(&mut data, n, |r, out| {
                let row = &x[r * n..(r + 1) * n];
                let mrow = mask.map(|m| {
                    let mr = r % mask_rows.unwrap();
                    &m[mr * n..(mr + 1) * n]
                });
                softmax_row(row, mrow, out);
            });
        }
        let out_vals = data.clone();
        let p = self.clone();
        Tensor::from_op(data, &shape, vec![p.clone()], move |g| {
            if p.on_tape() {
                let mut gx = vec![E::zero(); p.len()];
                for_each_chunk_mut(&mut gx, n, |r, out| {
                    let y = &out_vals[r * n..(r + 1) * n];
                    let gy = &g[r * n..(r + 1) * n];
                    let mut dot = E::zero();
                    for i in 0..n {
                        dot += gy[i] * y[i];
                    }
                    for i in 0..n {
                        out[i] = y[i] * (gy[i] - dot);
                    }
                });
                p.accumulate_grad(&gx);
            }
        })
    }

    /// Repeats the tensor `m` times along a new leading axis; backward sums
    /// over the tiles.
    pub fn tile_leading(&self, m: usize) -> Tensor<E> {
        let n = self.len();
        let mut out_shape = vec![m];
        out_shape.extend_from_slice(self.shape());
        let mut data = Vec::with_capacity(m * n);
        {
            let src = self.data();
            for _ in 0..m {
                data.extend_from_slice(&src);
            }
        }
        let p = self.clone();
        Tensor::from_op(data, &out_shape, vec![p.clone()], move |g| {
            if p.on_tape() {
                let mut gp = vec![E::zero(); n];
                for t in 0..m {
                    for i in 0..n {
                        gp[i] += g[t * n + i];
                    }
                }
                p.accumulate_grad(&gp);
            }
        })
    }

    // ── table gather (relative position bias) ────────────────────────

    /// Gathers rows of `self` ([R, H]) at `idx`, producing [len, H].
    /// Backward scatter-adds into the table.
    pub fn gather_rows(&self, idx: &[usize]) -> Tensor<E> {
        assert_eq!(self.shape().len(), 2, "gather_rows expects a 2-D table");
        let (r, h) = (self.shape()[0], self.shape()[1]);
        for &i in idx {
            assert!(i < r, "gather_rows index out of range");
        }
        let mut data = vec![E::zero(); idx.len() * h];
        {
            let t = self.data();
            for (o, &i) in idx.iter().enumerate() {
                data[o * h..(o + 1) * h].copy_from_slice(&t[i * h..(i + 1) * h]);
            }
        }
        let p = self.clone();
        let idx_owned = idx.to_vec();
        Tensor::from_op(data, &[idx.len(), h], vec![p.clone()], move |g| {
            if p.on_tape() {
                let mut gt = vec![E::zero(); r * h];
                for (o, &i) in idx_owned.iter().enumerate() {
                    for j in 0..h {
                        gt[i * h + j] += g[o * h + j];
                    }
                }
                p.accumulate_grad(&gt);
            }
        })
    }
}

fn softmax_row<E: Element>(row: &[E], mask: Option<&[bool]>, out: &mut [E]) {
    let n = row.len();
    let mut mx: Option<E> = None;
    for i in 0..n {
        if mask.map_or(true, |m| m[i]) {
            mx = Some(match mx {
                Some(m) => m.max(row[i]),
                None => row[i],
            });
        }
    }
    let mx = mx.expect("softmax row fully masked");
    let mut sum = E::zero();
    for i in 0..n {
        if mask.map_or(true, |m| m[i]) {
            let e = (row[i] - mx).exp();
            out[i] = e;
            sum += e;
        } else {
            out[i] = E::zero();
        }
    }
    for v in out.iter_mut() {
        *v = *v / sum;
    }
}

fn permute_data<E: Element>(src: &[E], in_shape: &[usize], axes: &[usize]) -> Vec<E> {
    let rank = in_shape.len();
    let out_shape: Vec<usize> = axes.iter().map(|&a| in_shape[a]).collect();
    let in_str = strides(in_shape);
    let out_str = strides(&out_shape);
    let mut out = vec![src[0]; src.len()];
    // Walk output linearly, compute source index.
    for (o, item) in out.iter_mut().enumerate() {
        let mut rem = o;
        let mut src_idx = 0;
        for d in 0..rank {
            let coord = rem / out_str[d];
            rem %= out_str[d];
            src_idx += coord * in_str[axes[d]];
        }
        *item = src[src_idx];
    }
    out
}

fn roll_data<E: Element>(src: &[E], lead: usize, h: usize, w: usize, dy: isize, dx: isize) -> Vec<E> {
    let sy = dy.rem_euclid(h as isize) as usize;
    let sx = dx.rem_euclid(w as isize) as usize;
    let mut out = vec![src[0]; src.len()];
    for l in 0..lead {
        let base = l * h * w;
        for y in 0..h {
            let ty = (y + sy) % h;
            for x in 0..w {
                let tx = (x + sx) % w;
                out[base + ty * w + tx] = src[base + y * w + x];
            }
        }
    }
    out
}
