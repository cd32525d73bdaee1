//! Per-block 2-D FFT (radix-2) and the differentiable frequency-modulation op.
//!
//! Blocks are power-of-two sized and transformed in place within the spatial
//! layout, so block merging is the identity. The forward DFT is unnormalized;
//! the inverse carries the 1/N factor.

use super::{ComplexTensor, Element, Tensor};
use crate::error::{Error, Result};
use crate::parallel::for_each_chunk_mut;

fn is_pow2(n: usize) -> bool {
    n != 0 && n & (n - 1) == 0
}

/// Iterative radix-2 Cooley-Tukey, in place.
fn fft1d<E: Element>(re: &mut [E], im: &mut [E], inverse: bool) {
    let n = re.len();
    debug_assert!(is_pow2(n));
    if n <= 1 {
        return;
    }
    // Bit-reversal permutation.
    let mut j = 0usize;
    for i in 1..n {
        let mut bit = n >> 1;
        while j & bit != 0 {
            j ^= bit;
            bit >>= 1;
        }
        j |= bit;
        if i < j {
            re.swap(i, j);
            im.swap(i, j);
        }
    }
    let sign = if inverse { 1.0 } else { -1.0 };
    let mut len = 2;
    while len <= n {
        let ang = sign * 2.0 * std::f64::consts::PI / len as f64;
        let (wr, wi) = (E::from_f64(ang.cos()), E::from_f64(ang.sin()));
        let mut i = 0;
        while i < n {
            let mut cr = E::one();
            let mut ci = E::zero();
            for k in 0..len / 2 {
                let (ur, ui) = (re[i + k], im[i + k]);
                let (vr0, vi0) = (re[i + k + len / 2], im[i + k + len / 2]);
                let vr = vr0 * cr - vi0 * ci;
                let vi = vr0 * ci + vi0 * cr;
                re[i + k] = ur + vr;
                im[i + k] = ui + vi;
                re[i + k + len / 2] = ur - vr;
                im[i + k + len / 2] = ui - vi;
                let ncr = cr * wr - ci * wi;
                ci = cr * wi + ci * wr;
                cr = ncr;
            }
            i += len;
        }
        len <<= 1;
    }
    if inverse {
        let scale = E::one() / E::from_f64(n as f64);
        for v in re.iter_mut() {
            *v = *v * scale;
        }
        for v in im.iter_mut() {
            *v = *v * scale;
        }
    }
}

/// 2-D FFT of one (h x w) channel plane, independently per (bh x bw) block.
fn fft2_plane<E: Element>(re: &mut [E], im: &mut [E], h: usize, w: usize, bh: usize, bw: usize, inverse: bool) {
    for by in (0..h).step_by(bh) {
        for bx in (0..w).step_by(bw) {
            // Rows.
            for y in 0..bh {
                let off = (by + y) * w + bx;
                fft1d(&mut re[off..off + bw], &mut im[off..off + bw], inverse);
            }
            // Columns via gather/scatter.
            let mut cr = vec![E::zero(); bh];
            let mut ci = vec![E::zero(); bh];
            for x in 0..bw {
                for y in 0..bh {
                    cr[y] = re[(by + y) * w + bx + x];
                    ci[y] = im[(by + y) * w + bx + x];
                }
                fft1d(&mut cr, &mut ci, inverse);
                for y in 0..bh {
                    re[(by + y) * w + bx + x] = cr[y];
                    im[(by + y) * w + bx + x] = ci[y];
                }
            }
        }
    }
}

fn check_block(h: usize, w: usize, bh: usize, bw: usize) -> Result<()> {
    if !is_pow2(bh) || !is_pow2(bw) {
        return Err(Error::Dim(format!(
            "block extents must be powers of two, got {bh}x{bw}"
        )));
    }
    if h % bh != 0 || w % bw != 0 {
        return Err(Error::Dim(format!(
            "spatial extents {h}x{w} not divisible by block {bh}x{bw}"
        )));
    }
    Ok(())
}

/// Per-block 2-D DFT of a real tensor [..., H, W].
pub fn fft2_block<E: Element>(x: &Tensor<E>, block: (usize, usize)) -> Result<ComplexTensor<E>> {
    let shape = x.shape().to_vec();
    let rank = shape.len();
    let (h, w) = (shape[rank - 2], shape[rank - 1]);
    let (bh, bw) = block;
    check_block(h, w, bh, bw)?;
    let lead: usize = shape[..rank - 2].iter().product();
    let mut re = x.to_vec();
    let mut im = vec![E::zero(); re.len()];
    fft_planes(&mut re, &mut im, lead, h, w, bh, bw, false);
    Ok(ComplexTensor::new(re, im, &shape))
}

/// Per-block inverse 2-D DFT.
pub fn ifft2_block<E: Element>(x: &ComplexTensor<E>, block: (usize, usize)) -> Result<ComplexTensor<E>> {
    let shape = x.shape().to_vec();
    let rank = shape.len();
    let (h, w) = (shape[rank - 2], shape[rank - 1]);
    let (bh, bw) = block;
    check_block(h, w, bh, bw)?;
    let lead: usize = shape[..rank - 2].iter().product();
    let mut re = x.re.clone();
    let mut im = x.im.clone();
    fft_planes(&mut re, &mut im, lead, h, w, bh, bw, true);
    Ok(ComplexTensor::new(re, im, &shape))
}

#[allow(clippy::too_many_arguments)]
fn fft_planes<E: Element>(
    re: &mut [E],
    im: &mut [E],
    lead: usize,
    h: usize,
    w: usize,
    bh: usize,
    bw: usize,
    inverse: bool,
) {
    // Planes are independent; split both buffers per plane.
    let plane = h * w;
    let im_chunks: Vec<&mut [E]> = im.chunks_mut(plane).collect();
    let mut paired: Vec<(&mut [E], &mut [E])> = re
        .chunks_mut(plane)
        .zip(im_chunks)
        .map(|(r, i)| (r, i))
        .collect();
    debug_assert_eq!(paired.len(), lead);
    for_each_chunk_mut(&mut paired, 1, |_, pair| {
        let (r, i) = &mut pair[0];
        fft2_plane(r, i, h, w, bh, bw, inverse);
    });
}

/// Differentiable frequency modulation: per channel `c` and per block,
/// `out = Re(IFFT2(FFT2(x_block) ⊙ W_c))` with complex filter
/// `W = w_re + i·w_im` of shape [C, bh, bw] shared across blocks.
pub fn freq_modulate<E: Element>(
    x: &Tensor<E>,
    w_re: &Tensor<E>,
    w_im: &Tensor<E>,
    block: (usize, usize),
) -> Result<Tensor<E>> {
    let shape = x.shape().to_vec();
    if shape.len() != 3 {
        return Err(Error::Dim("freq_modulate expects [C,H,W]".into()));
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);
    let (bh, bw) = block;
    check_block(h, w, bh, bw)?;
    if w_re.shape() != [c, bh, bw] || w_im.shape() != [c, bh, bw] {
        return Err(Error::Config(format!(
            "filter shape must be [{c},{bh},{bw}], got {:?}/{:?}",
            w_re.shape(),
            w_im.shape()
        )));
    }

    let forward = |xs: &[E], wre: &[E], wim: &[E]| -> Vec<E> {
        let mut re = xs.to_vec();
        let mut im = vec![E::zero(); xs.len()];
        fft_planes(&mut re, &mut im, c, h, w, bh, bw, false);
        modulate_in_place(&mut re, &mut im, wre, wim, c, h, w, bh, bw);
        fft_planes(&mut re, &mut im, c, h, w, bh, bw, true);
        re
    };
    let data = forward(&x.data(), &w_re.data(), &w_im.data());

    let (px, pwr, pwi) = (x.clone(), w_re.clone(), w_im.clone());
    Ok(Tensor::from_op(
        data,
        &shape,
        vec![px.clone(), pwr.clone(), pwi.clone()],
        move |g| {
            let wre = pwr.data().clone();
            let wim = pwi.data().clone();
            // IFFT2 of the (real) output gradient, shared by all three grads.
            let mut gr = g.to_vec();
            let mut gi = vec![E::zero(); g.len()];
            fft_planes(&mut gr, &mut gi, c, h, w, bh, bw, true);
            if px.on_tape() {
                // grad_x = Re(FFT2(W ⊙ IFFT2(g)))
                let mut mr = gr.clone();
                let mut mi = gi.clone();
                modulate_in_place(&mut mr, &mut mi, &wre, &wim, c, h, w, bh, bw);
                fft_planes(&mut mr, &mut mi, c, h, w, bh, bw, false);
                px.accumulate_grad(&mr);
            }
            if pwr.on_tape() || pwi.on_tape() {
                // S = IFFT2(g) ⊙ FFT2(x), summed over blocks:
                // grad_w_re = Re(S), grad_w_im = -Im(S).
                let mut xr = px.data().clone();
                let mut xi = vec![E::zero(); xr.len()];
                fft_planes(&mut xr, &mut xi, c, h, w, bh, bw, false);
                let mut swr = vec![E::zero(); c * bh * bw];
                let mut swi = vec![E::zero(); c * bh * bw];
                for ch in 0..c {
                    for by in (0..h).step_by(bh) {
                        for bx in (0..w).step_by(bw) {
                            for y in 0..bh {
                                for xcol in 0..bw {
                                    let idx = ch * h * w + (by + y) * w + bx + xcol;
                                    let (ar, ai) = (gr[idx], gi[idx]);
                                    let (br, bi) = (xr[idx], xi[idx]);
                                    let widx = ch * bh * bw + y * bw + xcol;
                                    swr[widx] += ar * br - ai * bi;
                                    swi[widx] += ar * bi + ai * br;
                                }
                            }
                        }
                    }
                }
                if pwr.on_tape() {
                    pwr.accumulate_grad(&swr);
                }
                if pwi.on_tape() {
                    let neg: Vec<E> = swi.iter().map(|&v| -v).collect();
                    pwi.accumulate_grad(&neg);
                }
            }
        },
    ))
}

#[allow(clippy::too_many_arguments)]
fn modulate_in_place<E: Element>(
    re: &mut [E],
    im: &mut [E],
    wre: &[E],
    wim: &[E],
    c: usize,
    h: usize,
    w: usize,
    bh: usize,
    bw: usize,
) {
    for ch in 0..c {
        for by in (0..h).step_by(bh) {
            for bx in (0..w).step_by(bw) {
                for y in 0..bh {
                    for x in 0..bw {
                        let idx = ch * h * w + (by + y) * w + bx + x;
                        let widx = ch * bh * bw + y * bw + x;
                        let (ar, ai) = (re[idx], im[idx]);
                        let (br, bi) = (wre[widx], wim[widx]);
                        re[idx] = ar * br - ai * bi;
                        im[idx] = ar * bi + ai * br;
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_block_is_dc_only() {
        let c = 3.25f64;
        let x = Tensor::full(&[1, 4, 4], c);
        let f = fft2_block(&x, (4, 4)).unwrap();
        assert!((f.re[0] - c * 16.0).abs() < 1e-12);
        for i in 1..16 {
            assert!(f.re[i].abs() < 1e-12 && f.im[i].abs() < 1e-12);
        }
    }

    #[test]
    fn impulse_is_flat_spectrum() {
        let mut d = vec![0.0f64; 16];
        d[0] = 1.0;
        let x = Tensor::new(d, &[1, 4, 4]);
        let f = fft2_block(&x, (4, 4)).unwrap();
        for i in 0..16 {
            assert!((f.re[i] - 1.0).abs() < 1e-12 && f.im[i].abs() < 1e-12);
        }
    }

    #[test]
    fn roundtrip_identity() {
        let data: Vec<f64> = (0..2 * 16 * 16).map(|v| ((v * 37) % 101) as f64 * 0.01 - 0.5).collect();
        let x = Tensor::new(data.clone(), &[2, 16, 16]);
        let back = ifft2_block(&fft2_block(&x, (8, 8)).unwrap(), (8, 8)).unwrap();
        for i in 0..data.len() {
            assert!((back.re[i] - data[i]).abs() < 1e-10);
            assert!(back.im[i].abs() < 1e-10);
        }
    }

    /// Naive O(N^4) 2-D DFT used as the independent oracle.
    fn naive_dft2(x: &[f64], n: usize) -> (Vec<f64>, Vec<f64>) {
        let mut re = vec![0.0; n * n];
        let mut im = vec![0.0; n * n];
        for u in 0..n {
            for v in 0..n {
                let (mut ar, mut ai) = (0.0, 0.0);
                for y in 0..n {
                    for xc in 0..n {
                        let ang = -2.0 * std::f64::consts::PI
                            * (u as f64 * y as f64 + v as f64 * xc as f64)
                            / n as f64;
                        ar += x[y * n + xc] * ang.cos();
                        ai += x[y * n + xc] * ang.sin();
                    }
                }
                re[u * n + v] = ar;
                im[u * n + v] = ai;
            }
        }
        (re, im)
    }

    #[test]
    fn matches_naive_dft_oracle_16x16() {
        let n = 16;
        let data: Vec<f64> = (0..n * n)
            .map(|v| (((v * 73 + 11) % 257) as f64 / 257.0) - 0.5)
            .collect();
        let x = Tensor::new(data.clone(), &[1, n, n]);
        let f = fft2_block(&x, (n, n)).unwrap();
        let (ore, oim) = naive_dft2(&data, n);
        for i in 0..n * n {
            assert!((f.re[i] - ore[i]).abs() < 1e-9, "re mismatch at {i}");
            assert!((f.im[i] - oim[i]).abs() < 1e-9, "im mismatch at {i}");
        }
    }

    #[test]
    fn non_divisible_extent_errors() {
        let x = Tensor::<f64>::zeros(&[1, 6, 8]);
        assert!(fft2_block(&x, (4, 4)).is_err());
    }

    #[test]
    fn identity_filter_is_identity() {
        let data: Vec<f64> = (0..64).map(|v| (v as f64 * 0.37).sin()).collect();
        let x = Tensor::new(data.clone(), &[1, 8, 8]);
        let wre = Tensor::full(&[1, 4, 4], 1.0);
        let wim = Tensor::zeros(&[1, 4, 4]);
        let y = freq_modulate(&x, &wre, &wim, (4, 4)).unwrap();
        for (a, b) in y.to_vec().iter().zip(&data) {
            assert!((a - b).abs() < 1e-10);
        }
    }

    #[test]
    fn zero_filter_gives_zero() {
        let x = Tensor::new((0..64).map(|v| v as f64).collect(), &[1, 8, 8]);
        let w0 = Tensor::zeros(&[1, 4, 4]);
        let y = freq_modulate(&x, &w0, &w0, (4, 4)).unwrap();
        assert!(y.to_vec().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn dc_filter_gives_block_means() {
        // One-hot at DC: each block of the output equals the block mean.
        let data: Vec<f64> = (0..64).map(|v| ((v * 29) % 17) as f64 - 8.0).collect();
        let x = Tensor::new(data.clone(), &[1, 8, 8]);
        let mut wre = vec![0.0; 16];
        wre[0] = 1.0;
        let wre = Tensor::new(wre, &[1, 4, 4]);
        let wim = Tensor::zeros(&[1, 4, 4]);
        let y = freq_modulate(&x, &wre, &wim, (4, 4)).unwrap();
        let out = y.to_vec();
        for by in (0..8).step_by(4) {
            for bx in (0..8).step_by(4) {
                let mut mean = 0.0;
                for yy in 0..4 {
                    for xx in 0..4 {
                        mean += data[(by + yy) * 8 + bx + xx];
                    }
                }
                mean /= 16.0;
                for yy in 0..4 {
                    for xx in 0..4 {
                        assert!((out[(by + yy) * 8 + bx + xx] - mean).abs() < 1e-10);
                    }
                }
            }
        }
    }

    #[test]
    fn block_locality() {
        // Changing one block leaves every other block's output untouched.
        let base: Vec<f64> = (0..64).map(|v| (v as f64 * 0.11).cos()).collect();
        let mut pert = base.clone();
        pert[0] += 1.0; // inside block (0,0)
        let wre = Tensor::new((0..16).map(|v| 0.5 + 0.1 * v as f64).collect(), &[1, 4, 4]);
        let wim = Tensor::new((0..16).map(|v| 0.02 * v as f64).collect(), &[1, 4, 4]);
        let y0 = freq_modulate(&Tensor::new(base, &[1, 8, 8]), &wre, &wim, (4, 4)).unwrap();
        let y1 = freq_modulate(&Tensor::new(pert, &[1, 8, 8]), &wre, &wim, (4, 4)).unwrap();
        let (a, b) = (y0.to_vec(), y1.to_vec());
        for yy in 0..8 {
            for xx in 0..8 {
                let same_block = yy < 4 && xx < 4;
                if !same_block {
                    assert_eq!(a[yy * 8 + xx], b[yy * 8 + xx]);
                }
            }
        }
    }
}
