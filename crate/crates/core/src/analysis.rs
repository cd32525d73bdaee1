//! Spectrum and learned-filter exports.
//!
//! The spectrum export runs images through the transforms, captures each
//! window-attention group's output at the FAT block adjacent to the latent,
//! takes a 16x16 block DFT of the feature planes, and averages the magnitude
//! over channels, blocks, and images. The filter export dumps the magnitude
//! of the complex spectral filter of the same blocks, one grid per channel.
//! All grids are DC-centered (frequency zero in the middle).

use std::io::Write;

use crate::error::{Error, Result};
use crate::fdwa::{WindowKind, WINDOW_KINDS};
use crate::model::FatLic;
use crate::tensor::{fft2_block, no_grad, Element, Tensor};

/// Spectrum grid extent (16x16 frequency bins).
pub const SPECTRUM_N: usize = 16;

/// One DC-centered frequency-magnitude grid.
#[derive(Debug, Clone)]
pub struct FreqGrid {
    /// Grid extent per side.
    pub n: usize,
    /// Row-major magnitudes, frequency zero at (n/2, n/2).
    pub values: Vec<f64>,
}

impl FreqGrid {
    /// Fraction of total energy inside the centered square of half-extent
    /// `half` (squared magnitudes).
    pub fn central_energy_fraction(&self, half: usize) -> f64 {
        let c = self.n / 2;
        let mut inner = 0.0;
        let mut total = 0.0;
        for r in 0..self.n {
            for q in 0..self.n {
                let e = self.values[r * self.n + q].powi(2);
                total += e;
                if r.abs_diff(c) <= half && q.abs_diff(c) <= half {
                    inner += e;
                }
            }
        }
        if total == 0.0 {
            0.0
        } else {
            inner / total
        }
    }

    /// Mean magnitude over cells whose Chebyshev distance from the center
    /// exceeds `inner` (the high-frequency outer ring).
    pub fn outer_ring_mean(&self, inner: usize) -> f64 {
        let c = self.n / 2;
        let mut acc = 0.0;
        let mut count = 0usize;
        for r in 0..self.n {
            for q in 0..self.n {
                if r.abs_diff(c).max(q.abs_diff(c)) > inner {
                    acc += self.values[r * self.n + q];
                    count += 1;
                }
            }
        }
        acc / count.max(1) as f64
    }

    /// Energy-weighted mean absolute frequency along one axis: 0 = rows
    /// (vertical frequency), 1 = columns (horizontal frequency).
    pub fn axis_spread(&self, axis: usize) -> f64 {
        let c = self.n / 2;
        let mut num = 0.0;
        let mut den = 0.0;
        for r in 0..self.n {
            for q in 0..self.n {
                let e = self.values[r * self.n + q].powi(2);
                let d = if axis == 0 { r.abs_diff(c) } else { q.abs_diff(c) };
                num += e * d as f64;
                den += e;
            }
        }
        if den == 0.0 {
            0.0
        } else {
            num / den
        }
    }
}

/// Per-group spectrum grids for the analysis and synthesis transforms, in
/// window-group order.
#[derive(Debug, Clone)]
pub struct SpectrumReport {
    pub analysis: Vec<FreqGrid>,
    pub synthesis: Vec<FreqGrid>,
}

/// Short label for a window-attention group.
pub fn group_label(kind: WindowKind) -> &'static str {
    match kind {
        WindowKind::LowLow => "LL",
        WindowKind::HighHigh => "HH",
        WindowKind::HighLow => "HL",
        WindowKind::LowHigh => "LH",
    }
}

/// Accumulates the DC-centered block-DFT magnitude of a [C, H, W] feature
/// map into `grid` (length n*n); returns the number of (channel, block)
/// planes folded in.
fn accumulate_spectrum<E: Element>(feat: &Tensor<E>, grid: &mut [f64]) -> Result<usize> {
    let n = SPECTRUM_N;
    let sh = feat.shape();
    let (c, h, w) = (sh[0], sh[1], sh[2]);
    if h < n || w < n {
        return Err(Error::Contract(format!(
            "feature map {h}x{w} smaller than the {n}x{n} spectrum block; use larger images"
        )));
    }
    let (ch, cw) = (h / n * n, w / n * n);
    let cropped = feat.crop2d(0, 0, ch, cw);
    let spec = fft2_block(&cropped, (n, n))?;
    let mag = spec.magnitude();
    let (bh, bw) = (ch / n, cw / n);
    for plane in 0..c {
        for bi in 0..bh {
            for bj in 0..bw {
                for u in 0..n {
                    for v in 0..n {
                        let src = plane * ch * cw + (bi * n + u) * cw + bj * n + v;
                        // DC-centered placement.
                        let dst = ((u + n / 2) % n) * n + (v + n / 2) % n;
                        grid[dst] += mag[src].as_f64();
                    }
                }
            }
        }
    }
    Ok(c * bh * bw)
}

/// Averaged per-group frequency-magnitude grids over a set of images.
pub fn spectrum<E: Element>(model: &FatLic<E>, images: &[Tensor<E>]) -> Result<SpectrumReport> {
    if images.is_empty() {
        return Err(Error::Contract("no images for spectrum analysis".into()));
    }
    no_grad(|| {
        let n = SPECTRUM_N;
        let mut grids_a = vec![vec![0.0; n * n]; 4];
        let mut grids_s = vec![vec![0.0; n * n]; 4];
        let mut counts_a = [0usize; 4];
        let mut counts_s = [0usize; 4];
        for img in images {
            let (y, caps_a) = model.g_a.forward_captured(img)?;
            let (_, caps_s) = model.g_s.forward_captured(&y.ste_round())?;
            for g in 0..4 {
                counts_a[g] += accumulate_spectrum(&caps_a[g], &mut grids_a[g])?;
                counts_s[g] += accumulate_spectrum(&caps_s[g], &mut grids_s[g])?;
            }
        }
        let finish = |grids: Vec<Vec<f64>>, counts: [usize; 4]| {
            grids
                .into_iter()
                .zip(counts)
                .map(|(mut g, c)| {
                    for v in g.iter_mut() {
                        *v /= c as f64;
                    }
                    FreqGrid { n, values: g }
                })
                .collect()
        };
        Ok(SpectrumReport {
            analysis: finish(grids_a, counts_a),
            synthesis: finish(grids_s, counts_s),
        })
    })
}

/// Per-channel magnitudes of one spectral filter bank, DC-centered.
fn filter_grids<E: Element>(w_re: &Tensor<E>, w_im: &Tensor<E>) -> Vec<FreqGrid> {
    let sh = w_re.shape();
    let (c, b) = (sh[0], sh[1]);
    let re = w_re.data();
    let im = w_im.data();
    (0..c)
        .map(|plane| {
            let mut values = vec![0.0; b * b];
            for u in 0..b {
                for v in 0..b {
                    let src = plane * b * b + u * b + v;
                    let dst = ((u + b / 2) % b) * b + (v + b / 2) % b;
                    values[dst] = re[src].as_f64().hypot(im[src].as_f64());
                }
            }
            FreqGrid { n: b, values }
        })
        .collect()
}

/// Spectral-filter magnitudes of the FAT block adjacent to the latent, one
/// grid per channel, for both transforms.
pub struct FilterReport {
    pub analysis: Vec<FreqGrid>,
    pub synthesis: Vec<FreqGrid>,
}

pub fn filters<E: Element>(model: &FatLic<E>) -> FilterReport {
    let fa = &model.g_a.deepest_fat().b.fmffn;
    let fs = &model.g_s.deepest_fat().b.fmffn;
    FilterReport {
        analysis: filter_grids(&fa.w_re, &fa.w_im),
        synthesis: filter_grids(&fs.w_re, &fs.w_im),
    }
}

/// Writes spectrum grids as `transform,group,row,col,magnitude` CSV rows.
pub fn write_spectrum_csv<W: Write>(report: &SpectrumReport, out: &mut W) -> Result<()> {
    writeln!(out, "transform,group,row,col,magnitude")?;
    for (name, grids) in [("analysis", &report.analysis), ("synthesis", &report.synthesis)] {
        for (kind, grid) in WINDOW_KINDS.iter().zip(grids) {
            for r in 0..grid.n {
                for c in 0..grid.n {
                    writeln!(
                        out,
                        "{name},{},{r},{c},{:.8}",
                        group_label(*kind),
                        grid.values[r * grid.n + c]
                    )?;
                }
            }
        }
    }
    Ok(())
}

/// Writes filter grids as `transform,channel,row,col,magnitude` CSV rows.
pub fn write_filters_csv<W: Write>(report: &FilterReport, out: &mut W) -> Result<()> {
    writeln!(out, "transform,channel,row,col,magnitude")?;
    for (name, grids) in [("analysis", &report.analysis), ("synthesis", &report.synthesis)] {
        for (ch, grid) in grids.iter().enumerate() {
            for r in 0..grid.n {
                for c in 0..grid.n {
                    writeln!(
                        out,
                        "{name},{ch},{r},{c},{:.8}",
                        grid.values[r * grid.n + c]
                    )?;
                }
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::CodecConfig;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn toy_model() -> FatLic<f32> {
        FatLic::<f32>::new(&CodecConfig::toy(), 11).unwrap()
    }

    #[test]
    fn spectrum_grids_have_expected_shape() {
        let model = toy_model();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let imgs: Vec<_> = (0..2)
            .map(|_| Tensor::<f32>::rand_uniform(&[3, 256, 256], 0.0, 1.0, &mut rng))
            .collect();
        let rep = spectrum(&model, &imgs).unwrap();
        assert_eq!(rep.analysis.len(), 4);
        assert_eq!(rep.synthesis.len(), 4);
        for g in rep.analysis.iter().chain(&rep.synthesis) {
            assert_eq!(g.n, SPECTRUM_N);
            assert_eq!(g.values.len(), SPECTRUM_N * SPECTRUM_N);
            assert!(g.values.iter().all(|v| v.is_finite() && *v >= 0.0));
            assert!(g.values.iter().any(|v| *v > 0.0));
        }
    }

    #[test]
    fn spectrum_rejects_small_images() {
        let model = toy_model();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = Tensor::<f32>::rand_uniform(&[3, 64, 64], 0.0, 1.0, &mut rng);
        assert!(matches!(
            spectrum(&model, &[img]),
            Err(Error::Contract(_))
        ));
        assert!(spectrum(&model, &[]).is_err());
    }

    #[test]
    fn fresh_filters_are_flat_ones() {
        let model = toy_model();
        let rep = filters(&model);
        let latent = model.cfg.transform.latent;
        let block = 4 * model.cfg.transform.s;
        assert_eq!(rep.analysis.len(), latent);
        assert_eq!(rep.synthesis.len(), latent);
        for g in rep.analysis.iter().chain(&rep.synthesis) {
            assert_eq!(g.n, block);
            assert!(g.values.iter().all(|&v| (v - 1.0).abs() < 1e-6));
        }
    }

    #[test]
    fn filter_export_centers_dc() {
        let model = toy_model();
        let b = 4 * model.cfg.transform.s;
        // Mark the DC bin of channel 0; the export must place it centrally.
        model.g_a.deepest_fat().b.fmffn.w_re.data_mut()[0] = 5.0;
        let rep = filters(&model);
        let g = &rep.analysis[0];
        assert_eq!(g.values[(b / 2) * b + b / 2], 5.0);
        assert_eq!(g.values[0], 1.0);
    }

    #[test]
    fn csv_exports_have_expected_row_counts() {
        let model = toy_model();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let img = Tensor::<f32>::rand_uniform(&[3, 256, 256], 0.0, 1.0, &mut rng);
        let rep = spectrum(&model, &[img]).unwrap();
        let mut buf = Vec::new();
        write_spectrum_csv(&rep, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * 4 * SPECTRUM_N * SPECTRUM_N);
        assert!(text.starts_with("transform,group,row,col,magnitude"));

        let frep = filters(&model);
        let mut buf = Vec::new();
        write_filters_csv(&frep, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let b = 4 * model.cfg.transform.s;
        let latent = model.cfg.transform.latent;
        assert_eq!(text.lines().count(), 1 + 2 * latent * b * b);
    }

    #[test]
    fn grid_statistics_helpers() {
        let n = SPECTRUM_N;
        // Impulse at the center: all energy central, zero outer ring.
        let mut values = vec![0.0; n * n];
        values[(n / 2) * n + n / 2] = 3.0;
        let g = FreqGrid { n, values };
        assert_eq!(g.central_energy_fraction(2), 1.0);
        assert_eq!(g.outer_ring_mean(4), 0.0);
        assert_eq!(g.axis_spread(0), 0.0);
        // Energy on the horizontal-frequency axis only.
        let mut values = vec![0.0; n * n];
        values[(n / 2) * n] = 2.0;
        let g2 = FreqGrid { n, values };
        assert_eq!(g2.axis_spread(0), 0.0);
        assert_eq!(g2.axis_spread(1), (n / 2) as f64);
    }
}
