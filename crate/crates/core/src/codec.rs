//! Image encode/decode pipelines.
//!
//! Encoding reflect-pads the image to a multiple of 64, runs the analysis and
//! hyper transforms, and range-codes the hyper latent under the factorized
//! prior and the latent under the model's conditional Gaussians. With the
//! autoregressive entropy model attached, slices are coded as separate
//! segments; the prediction for slice `g` is computed with slices `>= g`
//! zeroed, exactly as the decoder sees them, so encoder and decoder build
//! identical tables and the round trip is bitwise lossless on the latents.
//!
//! Quantization convention: the hyper latent and (stage >= 2) the latent are
//! rounded half away from zero; stage-1 streams code `round(y - mu)` and
//! restore `mu` additively.

use std::path::Path;

use crate::bitstream::Bitstream;
use crate::coder::gaussian::{round_half_away, GaussianCoder};
use crate::coder::range::{RangeDecoder, RangeEncoder};
use crate::error::{Error, Result};
use crate::model::FatLic;
use crate::tca::{apply_latent_residual, zero_slices_from};
use crate::tensor::{no_grad, Element, Tensor};
use crate::transforms::pad_to_multiple;

/// Spatial alignment required by the transform stack.
pub const PAD_MULTIPLE: usize = 64;

pub struct EncodeResult {
    pub bytes: Vec<u8>,
    /// Sum of -log2 of the coder probabilities of every coded symbol,
    /// bypass bits included.
    pub estimated_bits: f64,
}

/// Encodes an RGB image in [0, 1], shape [3, H, W].
pub fn encode_image<E: Element>(
    model: &FatLic<E>,
    lambda_index: usize,
    img: &Tensor<E>,
) -> Result<EncodeResult> {
    if lambda_index >= model.cfg.lambdas.len() {
        return Err(Error::Config(format!(
            "lambda index {lambda_index} out of range"
        )));
    }
    let sh = img.shape();
    if sh.len() != 3 || sh[0] != 3 {
        return Err(Error::Dim(format!("expected [3, H, W] image, got {sh:?}")));
    }
    let (h0, w0) = (sh[1], sh[2]);
    no_grad(|| {
        let x = pad_to_multiple(img, PAD_MULTIPLE)?;
        let y = model.g_a.forward(&x)?;
        let z = model.h_a.forward(&y)?;
        let z_int = round_tensor(&z);
        let mut bits = 0.0f64;

        let (z_ranges, z_bytes) = encode_hyper(model, &z_int, &mut bits)?;
        let z_hat = int_tensor(&z_int, z.shape());
        let phi = model.h_s.forward(&z_hat)?;

        let y_segments = match &model.tca {
            None => vec![encode_stage1(model, &phi, &y, &mut bits)?],
            Some(_) => encode_slices(model, &phi, &y, &mut bits)?,
        };

        let stream = Bitstream {
            config_hash: model.cfg.hash(),
            lambda_index: lambda_index as u8,
            height: h0 as u32,
            width: w0 as u32,
            z_ranges,
            z_bytes,
            y_segments,
        };
        Ok(EncodeResult {
            bytes: stream.to_bytes(),
            estimated_bits: bits,
        })
    })
}

/// Decodes a bitstream produced by [`encode_image`] with the same model.
pub fn decode_image<E: Element>(model: &FatLic<E>, bytes: &[u8]) -> Result<Tensor<E>> {
    let stream = Bitstream::from_bytes(bytes)?;
    if stream.config_hash != model.cfg.hash() {
        return Err(Error::ModelMismatch(
            "bitstream was produced by a different model configuration".into(),
        ));
    }
    if stream.lambda_index as usize >= model.cfg.lambdas.len() {
        return Err(Error::ModelMismatch("lambda index out of range".into()));
    }
    let (h0, w0) = (stream.height as usize, stream.width as usize);
    let hp = h0.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE;
    let wp = w0.div_ceil(PAD_MULTIPLE) * PAD_MULTIPLE;
    let (hl, wl) = (hp / 16, wp / 16);
    let (hz, wz) = (hl.div_ceil(4), wl.div_ceil(4));
    no_grad(|| {
        let z_hat = decode_hyper(model, &stream, hz, wz)?;
        let phi = model.h_s.forward(&z_hat)?;
        let y_hat = match &model.tca {
            None => decode_stage1(model, &phi, &stream, hl, wl)?,
            Some(_) => decode_slices(model, &phi, &stream, hl, wl)?,
        };
        let xr = model.g_s.forward(&y_hat)?;
        Ok(xr
            .crop2d(0, 0, h0, w0)
            .clamp(E::zero(), E::one())
            .detach())
    })
}

fn round_tensor<E: Element>(t: &Tensor<E>) -> Vec<i64> {
    t.data().iter().map(|v| round_half_away(v.as_f64())).collect()
}

fn int_tensor<E: Element>(ints: &[i64], shape: &[usize]) -> Tensor<E> {
    Tensor::new(ints.iter().map(|&v| E::from_f64(v as f64)).collect(), shape)
}

fn encode_hyper<E: Element>(
    model: &FatLic<E>,
    z_int: &[i64],
    bits: &mut f64,
) -> Result<(Vec<(i32, i32)>, Vec<u8>)> {
    let n = model.cfg.transform.hyper;
    let plane = z_int.len() / n;
    let mut ranges = Vec::with_capacity(n);
    for c in 0..n {
        let ch = &z_int[c * plane..(c + 1) * plane];
        let lo = *ch.iter().min().unwrap();
        let hi = *ch.iter().max().unwrap();
        ranges.push((lo as i32, hi as i32));
    }
    let mut enc = RangeEncoder::new();
    for c in 0..n {
        let (lo, hi) = ranges[c];
        let table = model.prior.table(c, lo as i64, hi as i64)?;
        for &v in &z_int[c * plane..(c + 1) * plane] {
            table.encode(&mut enc, v);
            *bits += table.bits(v);
        }
    }
    Ok((ranges, enc.finish()))
}

fn decode_hyper<E: Element>(
    model: &FatLic<E>,
    stream: &Bitstream,
    hz: usize,
    wz: usize,
) -> Result<Tensor<E>> {
    let n = model.cfg.transform.hyper;
    if stream.z_ranges.len() != n {
        return Err(Error::ModelMismatch(format!(
            "bitstream has {} hyper channels, model {n}",
            stream.z_ranges.len()
        )));
    }
    let plane = hz * wz;
    let mut dec = RangeDecoder::new(&stream.z_bytes)?;
    let mut data = Vec::with_capacity(n * plane);
    for c in 0..n {
        let (lo, hi) = stream.z_ranges[c];
        let table = model.prior.table(c, lo as i64, hi as i64)?;
        for _ in 0..plane {
            data.push(table.decode(&mut dec));
        }
    }
    Ok(int_tensor(&data, &[n, hz, wz]))
}

fn encode_stage1<E: Element>(
    model: &FatLic<E>,
    phi: &Tensor<E>,
    y: &Tensor<E>,
    bits: &mut f64,
) -> Result<Vec<u8>> {
    let (mu, sigma) = model.hyper_params(phi)?;
    let mut coder = GaussianCoder::new();
    let mut enc = RangeEncoder::new();
    let yd = y.data();
    let md = mu.data();
    let sd = sigma.data();
    for i in 0..yd.len() {
        let s = round_half_away(yd[i].as_f64() - md[i].as_f64());
        *bits += coder.bits(s, 0.0, sd[i].as_f64())?;
        coder.encode(&mut enc, s, 0.0, sd[i].as_f64())?;
    }
    Ok(enc.finish())
}

fn decode_stage1<E: Element>(
    model: &FatLic<E>,
    phi: &Tensor<E>,
    stream: &Bitstream,
    hl: usize,
    wl: usize,
) -> Result<Tensor<E>> {
    if stream.y_segments.len() != 1 {
        return Err(Error::ModelMismatch(format!(
            "expected 1 latent segment for a stage-1 model, found {}",
            stream.y_segments.len()
        )));
    }
    let (mu, sigma) = model.hyper_params(phi)?;
    let m = model.cfg.transform.latent;
    let mut coder = GaussianCoder::new();
    let mut dec = RangeDecoder::new(&stream.y_segments[0])?;
    let md = mu.data();
    let sd = sigma.data();
    let mut data = Vec::with_capacity(m * hl * wl);
    for i in 0..m * hl * wl {
        let s = coder.decode(&mut dec, 0.0, sd[i].as_f64())?;
        data.push(E::from_f64(s as f64) + md[i]);
    }
    Ok(Tensor::new(data, &[m, hl, wl]))
}

fn encode_slices<E: Element>(
    model: &FatLic<E>,
    phi: &Tensor<E>,
    y: &Tensor<E>,
    bits: &mut f64,
) -> Result<Vec<Vec<u8>>> {
    let tca = model.tca.as_ref().expect("stage >= 2");
    let cfg = &tca.cfg;
    let (hl, wl) = (y.shape()[1], y.shape()[2]);
    let plane = hl * wl;
    let ms = cfg.slice_width();
    let v_int = round_tensor(y);
    let v_full = int_tensor::<E>(&v_int, y.shape());
    let mut segments = Vec::with_capacity(cfg.n_slices);
    let mut coder = GaussianCoder::new();
    for g in 0..cfg.n_slices {
        // Predictions with slices >= g zeroed, matching decoder knowledge.
        let known = zero_slices_from(&v_full, cfg, g);
        let p = tca.params(phi, &known)?;
        let md = p.mu.data();
        let sd = p.sigma.data();
        let mut enc = RangeEncoder::new();
        for i in g * ms * plane..(g + 1) * ms * plane {
            let v = v_int[i];
            *bits += coder.bits(v, md[i].as_f64(), sd[i].as_f64())?;
            coder.encode(&mut enc, v, md[i].as_f64(), sd[i].as_f64())?;
        }
        segments.push(enc.finish());
    }
    Ok(segments)
}

fn decode_slices<E: Element>(
    model: &FatLic<E>,
    phi: &Tensor<E>,
    stream: &Bitstream,
    hl: usize,
    wl: usize,
) -> Result<Tensor<E>> {
    let tca = model.tca.as_ref().expect("stage >= 2");
    let cfg = &tca.cfg;
    if stream.y_segments.len() != cfg.n_slices {
        return Err(Error::ModelMismatch(format!(
            "expected {} latent segments, found {}",
            cfg.n_slices,
            stream.y_segments.len()
        )));
    }
    let m = cfg.latent;
    let ms = cfg.slice_width();
    let plane = hl * wl;
    let mut known = Tensor::<E>::zeros(&[m, hl, wl]);
    let mut coder = GaussianCoder::new();
    let mut lrp_parts: Vec<Tensor<E>> = Vec::with_capacity(cfg.n_slices);
    for g in 0..cfg.n_slices {
        let p = tca.params(phi, &known)?;
        let md = p.mu.data();
        let sd = p.sigma.data();
        let mut dec = RangeDecoder::new(&stream.y_segments[g])?;
        let mut decoded = Vec::with_capacity(ms * plane);
        for i in g * ms * plane..(g + 1) * ms * plane {
            decoded.push(coder.decode(&mut dec, md[i].as_f64(), sd[i].as_f64())?);
        }
        drop(md);
        drop(sd);
        lrp_parts.push(p.lrp.slice_axis(0, g * ms, ms));
        {
            let mut kd = known.data_mut();
            for (j, &v) in decoded.iter().enumerate() {
                kd[g * ms * plane + j] = E::from_f64(v as f64);
            }
        }
        known = Tensor::new(known.to_vec(), &[m, hl, wl]);
    }
    let lrp = Tensor::concat(&lrp_parts, 0);
    Ok(apply_latent_residual(&known, &lrp))
}

/// Loads a PNG (or PNM) image as an RGB tensor in [0, 1].
pub fn load_image<E: Element>(path: &Path) -> Result<Tensor<E>> {
    let img = image::open(path)?.to_rgb8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    let mut data = vec![E::zero(); 3 * h * w];
    for (x, y, px) in img.enumerate_pixels() {
        for c in 0..3 {
            data[c * h * w + y as usize * w + x as usize] =
                E::from_f64(px.0[c] as f64 / 255.0);
        }
    }
    Ok(Tensor::new(data, &[3, h, w]))
}

/// Saves an RGB tensor in [0, 1] as a PNG.
pub fn save_image<E: Element>(t: &Tensor<E>, path: &Path) -> Result<()> {
    let sh = t.shape();
    if sh.len() != 3 || sh[0] != 3 {
        return Err(Error::Dim(format!("expected [3, H, W] image, got {sh:?}")));
    }
    let (h, w) = (sh[1], sh[2]);
    let d = t.data();
    let mut img = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let px = [0, 1, 2].map(|c| {
                (d[c * h * w + y * w + x].as_f64().clamp(0.0, 1.0) * 255.0).round() as u8
            });
            img.put_pixel(x as u32, y as u32, image::Rgb(px));
        }
    }
    img.save(path)?;
    Ok(())
}
