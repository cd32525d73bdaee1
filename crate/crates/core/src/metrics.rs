//! Image quality metrics and rate-distortion curve comparison.
//!
//! PSNR and MS-SSIM operate on [C, H, W] images with values in [0, 1].
//! MS-SSIM is the standard 5-scale variant: an 11x11 Gaussian window with
//! sigma 1.5, valid-padding convolution, symmetric-pad 2x2 average-pool
//! downsampling, and the conventional scale weights. BD-rate compares two
//! rate-distortion curves by fitting a cubic to log-rate as a function of
//! quality and integrating the gap over the shared quality range.

use crate::error::{Error, Result};
use crate::tensor::{Element, Tensor};

/// Reported PSNR for a bit-exact reconstruction.
pub const PSNR_CAP: f64 = 100.0;

const MSSSIM_WEIGHTS: [f64; 5] = [0.0448, 0.2856, 0.3001, 0.2363, 0.1333];
const WINDOW: usize = 11;
const WINDOW_SIGMA: f64 = 1.5;
const K1: f64 = 0.01;
const K2: f64 = 0.03;

fn check_pair<E: Element>(x: &Tensor<E>, y: &Tensor<E>) -> Result<(usize, usize, usize)> {
    let (sx, sy) = (x.shape(), y.shape());
    if sx != sy {
        return Err(Error::Dim(format!("image shapes differ: {sx:?} vs {sy:?}")));
    }
    if sx.len() != 3 {
        return Err(Error::Dim(format!("expected [C, H, W] images, got {sx:?}")));
    }
    Ok((sx[0], sx[1], sx[2]))
}

/// Peak signal-to-noise ratio in dB on the 8-bit scale, capped at 100 dB.
pub fn psnr<E: Element>(x: &Tensor<E>, y: &Tensor<E>) -> Result<f64> {
    check_pair(x, y)?;
    let xd = x.data();
    let yd = y.data();
    let mut acc = 0.0;
    for i in 0..xd.len() {
        let d = xd[i].as_f64() - yd[i].as_f64();
        acc += d * d;
    }
    let mse = acc / xd.len() as f64;
    if mse == 0.0 {
        return Ok(PSNR_CAP);
    }
    Ok((-10.0 * mse.log10()).min(PSNR_CAP))
}

/// Bits per pixel of a coded payload.
pub fn bpp(bytes: usize, height: usize, width: usize) -> f64 {
    8.0 * bytes as f64 / (height as f64 * width as f64)
}

/// Normalized 1D Gaussian window.
fn gaussian_window() -> [f64; WINDOW] {
    let mut w = [0.0; WINDOW];
    let c = (WINDOW as f64 - 1.0) / 2.0;
    let mut sum = 0.0;
    for (i, v) in w.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * WINDOW_SIGMA * WINDOW_SIGMA)).exp();
        sum += *v;
    }
    for v in w.iter_mut() {
        *v /= sum;
    }
    w
}

/// Separable valid-padding convolution with a symmetric 1D kernel.
fn conv_valid(src: &[f64], h: usize, w: usize, k: &[f64; WINDOW]) -> (Vec<f64>, usize, usize) {
    let oh = h - WINDOW + 1;
    let ow = w - WINDOW + 1;
    let mut rows = vec![0.0; h * ow];
    for r in 0..h {
        for c in 0..ow {
            let mut acc = 0.0;
            for (t, &kv) in k.iter().enumerate() {
                acc += kv * src[r * w + c + t];
            }
            rows[r * ow + c] = acc;
        }
    }
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            let mut acc = 0.0;
            for (t, &kv) in k.iter().enumerate() {
                acc += kv * rows[(r + t) * ow + c];
            }
            out[r * ow + c] = acc;
        }
    }
    (out, oh, ow)
}

/// Symmetric-pads to even extents, then 2x2 average pooling.
fn downsample(src: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
    let (ph, pw) = (h + h % 2, w + w % 2);
    let get = |r: usize, c: usize| src[r.min(h - 1) * w + c.min(w - 1)];
    let (oh, ow) = (ph / 2, pw / 2);
    let mut out = vec![0.0; oh * ow];
    for r in 0..oh {
        for c in 0..ow {
            out[r * ow + c] = 0.25
                * (get(2 * r, 2 * c)
                    + get(2 * r, 2 * c + 1)
                    + get(2 * r + 1, 2 * c)
                    + get(2 * r + 1, 2 * c + 1));
        }
    }
    (out, oh, ow)
}

/// Mean luminance*structure and mean structure terms for one channel plane.
fn ssim_plane(x: &[f64], y: &[f64], h: usize, w: usize, k: &[f64; WINDOW]) -> (f64, f64) {
    let c1 = K1 * K1;
    let c2 = K2 * K2;
    let n = x.len();
    let mut xx = vec![0.0; n];
    let mut yy = vec![0.0; n];
    let mut xy = vec![0.0; n];
    for i in 0..n {
        xx[i] = x[i] * x[i];
        yy[i] = y[i] * y[i];
        xy[i] = x[i] * y[i];
    }
    let (mx, oh, ow) = conv_valid(x, h, w, k);
    let (my, _, _) = conv_valid(y, h, w, k);
    let (mxx, _, _) = conv_valid(&xx, h, w, k);
    let (myy, _, _) = conv_valid(&yy, h, w, k);
    let (mxy, _, _) = conv_valid(&xy, h, w, k);
    let mut lum_cs = 0.0;
    let mut cs = 0.0;
    for i in 0..oh * ow {
        let lum = (2.0 * mx[i] * my[i] + c1) / (mx[i] * mx[i] + my[i] * my[i] + c1);
        let c = (2.0 * (mxy[i] - mx[i] * my[i]) + c2)
            / ((mxx[i] - mx[i] * mx[i]) + (myy[i] - my[i] * my[i]) + c2);
        lum_cs += lum * c;
        cs += c;
    }
    let m = (oh * ow) as f64;
    (lum_cs / m, cs / m)
}

/// 5-scale MS-SSIM for images in [0, 1]; 1.0 means identical.
pub fn ms_ssim<E: Element>(x: &Tensor<E>, y: &Tensor<E>) -> Result<f64> {
    let (ch, h0, w0) = check_pair(x, y)?;
    let k = gaussian_window();
    let xd = x.data();
    let yd = y.data();
    let mut result = 0.0;
    for c in 0..ch {
        let mut xp: Vec<f64> = xd[c * h0 * w0..(c + 1) * h0 * w0]
            .iter()
            .map(|v| v.as_f64())
            .collect();
        let mut yp: Vec<f64> = yd[c * h0 * w0..(c + 1) * h0 * w0]
            .iter()
            .map(|v| v.as_f64())
            .collect();
        let (mut h, mut w) = (h0, w0);
        let mut acc = 1.0;
        for (scale, &weight) in MSSSIM_WEIGHTS.iter().enumerate() {
            if h < WINDOW || w < WINDOW {
                return Err(Error::Contract(format!(
                    "image scale {h}x{w} smaller than the {WINDOW}x{WINDOW} window; \
                     5-scale MS-SSIM needs at least {0}x{0} inputs",
                    WINDOW << (MSSSIM_WEIGHTS.len() - 1)
                )));
            }
            let (lum_cs, cs) = ssim_plane(&xp, &yp, h, w, &k);
            let term = if scale + 1 == MSSSIM_WEIGHTS.len() {
                lum_cs
            } else {
                cs
            };
            acc *= term.max(0.0).powf(weight);
            if scale + 1 < MSSSIM_WEIGHTS.len() {
                let (nx, nh, nw) = downsample(&xp, h, w);
                let (ny, _, _) = downsample(&yp, h, w);
                xp = nx;
                yp = ny;
                h = nh;
                w = nw;
            }
        }
        result += acc;
    }
    Ok(result / ch as f64)
}

/// Least-squares cubic fit of `ys` against centered `xs`; returns the
/// coefficients (low order first) and the centering offset.
fn cubic_fit(points: &[(f64, f64)]) -> ([f64; 4], f64) {
    let x0 = points.iter().map(|p| p.0).sum::<f64>() / points.len() as f64;
    let mut a = [[0.0f64; 5]; 4];
    for &(x, y) in points {
        let t = x - x0;
        let pows = [1.0, t, t * t, t * t * t];
        for r in 0..4 {
            for c in 0..4 {
                a[r][c] += pows[r] * pows[c];
            }
            a[r][4] += pows[r] * y;
        }
    }
    // Gaussian elimination with partial pivoting on the 4x5 system.
    for col in 0..4 {
        let piv = (col..4).max_by(|&i, &j| a[i][col].abs().total_cmp(&a[j][col].abs())).unwrap();
        a.swap(col, piv);
        for r in col + 1..4 {
            let f = a[r][col] / a[col][col];
            for c in col..5 {
                a[r][c] -= f * a[col][c];
            }
        }
    }
    let mut coef = [0.0f64; 4];
    for r in (0..4).rev() {
        let mut v = a[r][4];
        for c in r + 1..4 {
            v -= a[r][c] * coef[c];
        }
        coef[r] = v / a[r][r];
    }
    (coef, x0)
}

/// Definite integral of the fitted cubic over [lo, hi].
fn integrate_cubic(coef: &[f64; 4], x0: f64, lo: f64, hi: f64) -> f64 {
    let anti = |x: f64| {
        let t = x - x0;
        coef[0] * t + coef[1] * t * t / 2.0 + coef[2] * t * t * t / 3.0
            + coef[3] * t * t * t * t / 4.0
    };
    anti(hi) - anti(lo)
}

/// Average percent rate difference of curve `a` relative to curve `b` at
/// equal quality. Points are (bpp, quality) pairs; negative means `a` codes
/// the same quality with fewer bits.
pub fn bd_rate(a: &[(f64, f64)], b: &[(f64, f64)]) -> Result<f64> {
    for (name, curve) in [("first", a), ("second", b)] {
        if curve.len() < 4 {
            return Err(Error::Contract(format!(
                "{name} curve has {} points; BD-rate needs at least 4",
                curve.len()
            )));
        }
        if curve.iter().any(|&(r, _)| r <= 0.0) {
            return Err(Error::Contract(format!("{name} curve has a non-positive rate")));
        }
    }
    let log_curve = |c: &[(f64, f64)]| -> Vec<(f64, f64)> {
        c.iter().map(|&(r, q)| (q, r.log10())).collect()
    };
    let la = log_curve(a);
    let lb = log_curve(b);
    let span = |c: &[(f64, f64)]| {
        let lo = c.iter().map(|p| p.0).fold(f64::INFINITY, f64::min);
        let hi = c.iter().map(|p| p.0).fold(f64::NEG_INFINITY, f64::max);
        (lo, hi)
    };
    let (alo, ahi) = span(&la);
    let (blo, bhi) = span(&lb);
    let lo = alo.max(blo);
    let hi = ahi.min(bhi);
    if hi <= lo {
        return Err(Error::Contract(
            "rate-distortion curves share no quality range".into(),
        ));
    }
    let (ca, xa) = cubic_fit(&la);
    let (cb, xb) = cubic_fit(&lb);
    let diff = (integrate_cubic(&ca, xa, lo, hi) - integrate_cubic(&cb, xb, lo, hi)) / (hi - lo);
    Ok((10f64.powf(diff) - 1.0) * 100.0)
}
