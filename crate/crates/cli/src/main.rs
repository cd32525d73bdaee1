//! Command-line interface for the fatc image codec.
//!
//! Subcommands: `encode` and `decode` move images through a trained
//! checkpoint, `train` fits a model on a PNG corpus, `eval` reports
//! bpp/PSNR/MS-SSIM over a dataset, and `analyze-spectrum` /
//! `visualize-filters` export the frequency diagnostics as CSV.
//!
//! Exit codes: 0 success, 2 I/O failure, 3 malformed file or corrupt
//! stream, 4 checkpoint/bitstream model mismatch, 1 anything else.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fatc::analysis;
use fatc::checkpoint;
use fatc::codec;
use fatc::metrics;
use fatc::model::{CodecConfig, FatLic};
use fatc::train::{self, TrainConfig};
use fatc::Error;

#[derive(Parser)]
#[command(name = "fatc", version, about = "Learned image codec with frequency-aware transforms")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Compress a PNG image into a .fatc bitstream.
    Encode {
        /// Input image path.
        input: PathBuf,
        /// Trained checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Output bitstream path.
        #[arg(long)]
        out: PathBuf,
        /// Rate point; defaults to the one stored in the checkpoint.
        #[arg(long)]
        lambda_index: Option<usize>,
    },
    /// Decompress a .fatc bitstream back to a PNG image.
    Decode {
        /// Input bitstream path.
        input: PathBuf,
        /// Trained checkpoint.
        #[arg(long)]
        model: PathBuf,
        /// Output image path.
        #[arg(long)]
        out: PathBuf,
    },
    /// Train a model on a directory of PNG images.
    Train {
        /// Corpus directory.
        corpus: PathBuf,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Use the small test-scale configuration instead of the full one.
        #[arg(long)]
        toy: bool,
        #[arg(long, default_value_t = 3)]
        lambda_index: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Steps for the transforms-plus-hyper-prior stage.
        #[arg(long)]
        stage1_steps: Option<usize>,
        /// Steps after the autoregressive entropy model is attached.
        #[arg(long)]
        stage2_steps: Option<usize>,
        /// Low-learning-rate polish steps.
        #[arg(long)]
        stage3_steps: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        batch: Option<usize>,
        #[arg(long)]
        crop: Option<usize>,
        /// Optional training-log CSV (step,stage,bpp,distortion,loss).
        #[arg(long)]
        log: Option<PathBuf>,
    },
    /// Encode and decode every PNG in a directory and report metrics.
    Eval {
        /// Dataset directory.
        dataset: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Optional per-image report CSV; stdout summary is always printed.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Optional anchor rate-distortion curve CSV (bpp,psnr per line)
        /// for a BD-rate comparison; needs at least 4 evaluated images.
        #[arg(long)]
        anchor: Option<PathBuf>,
    },
    /// Export averaged frequency-magnitude grids of the window-attention
    /// groups as CSV.
    AnalyzeSpectrum {
        /// Corpus directory to sample patches from.
        corpus: PathBuf,
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Number of random patches to average over.
        #[arg(long, default_value_t = 20)]
        patches: usize,
        /// Patch extent; must give the latent at least 16x16 positions.
        #[arg(long, default_value_t = 256)]
        patch_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Export the spectral-filter magnitudes of the deepest FAT blocks as
    /// CSV, one grid per latent channel.
    VisualizeFilters {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let code = match e {
                Error::Io(_) | Error::Image(_) => 2,
                Error::Format(_) | Error::Decode { .. } => 3,
                Error::ModelMismatch(_) => 4,
                _ => 1,
            };
            ExitCode::from(code)
        }
    }
}

fn load_model(path: &Path) -> Result<(FatLic<f32>, usize), Error> {
    checkpoint::load::<f32>(path)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.cmd {
        Cmd::Encode {
            input,
            model,
            out,
            lambda_index,
        } => {
            let (m, stored_lambda) = load_model(&model)?;
            let img = codec::load_image::<f32>(&input)?;
            let lam = lambda_index.unwrap_or(stored_lambda);
            let res = codec::encode_image(&m, lam, &img)?;
            fs::write(&out, &res.bytes)?;
            let sh = img.shape();
            let bpp = metrics::bpp(res.bytes.len(), sh[1], sh[2]);
            println!(
                "{} -> {}: {} bytes, {bpp:.4} bpp (estimate {:.4})",
                input.display(),
                out.display(),
                res.bytes.len(),
                res.estimated_bits / (sh[1] * sh[2]) as f64
            );
            Ok(())
        }
        Cmd::Decode { input, model, out } => {
            let (m, _) = load_model(&model)?;
            let bytes = fs::read(&input)?;
            let img = codec::decode_image(&m, &bytes)?;
            codec::save_image(&img, &out)?;
            let sh = img.shape();
            println!("{} -> {} ({}x{})", input.display(), out.display(), sh[2], sh[1]);
            Ok(())
        }
        Cmd::Train {
            corpus,
            out,
            toy,
            lambda_index,
            seed,
            stage1_steps,
            stage2_steps,
            stage3_steps,
            lr,
            batch,
            crop,
            log,
        } => {
            let cfg = if toy { CodecConfig::toy() } else { CodecConfig::full() };
            let mut tc = TrainConfig {
                lambda_index,
                seed,
                ..TrainConfig::default()
            };
            if let Some(v) = stage1_steps {
                tc.stage1_steps = v;
            }
            if let Some(v) = stage2_steps {
                tc.stage2_steps = v;
            }
            if let Some(v) = stage3_steps {
                tc.stage3_steps = v;
            }
            if let Some(v) = lr {
                tc.lr = v;
            }
            if let Some(v) = batch {
                tc.batch = v;
            }
            if let Some(v) = crop {
                tc.crop = v;
            }
            let images = train::load_corpus::<f32>(&corpus)?;
            let mut model = FatLic::<f32>::new(&cfg, seed)?;
            let mut log_file = match &log {
                Some(p) => Some(fs::File::create(p)?),
                None => None,
            };
            let steps = train::train(
                &mut model,
                &tc,
                &images,
                log_file.as_mut().map(|f| f as &mut dyn std::io::Write),
            )?;
            checkpoint::save(&out, &model, lambda_index)?;
            if let Some(last) = steps.last() {
                println!(
                    "trained {} steps (final stage {}): loss {:.4}, bpp {:.4}, mse {:.4}",
                    steps.len(),
                    last.stage,
                    last.loss,
                    last.bpp,
                    last.distortion
                );
            }
            println!("checkpoint written to {}", out.display());
            Ok(())
        }
        Cmd::Eval {
            dataset,
            model,
            out,
            anchor,
        } => {
            let (m, lam) = load_model(&model)?;
            let images = train::load_corpus::<f32>(&dataset)?;
            let mut report = String::from("image,bytes,bpp,psnr,ms_ssim\n");
            let mut curve = Vec::new();
            let (mut sum_bpp, mut sum_psnr, mut sum_ssim, mut ssim_count) = (0.0, 0.0, 0.0, 0usize);
            for (i, img) in images.iter().enumerate() {
                let res = codec::encode_image(&m, lam, img)?;
                let rec = codec::decode_image(&m, &res.bytes)?;
                let sh = img.shape();
                let bpp = metrics::bpp(res.bytes.len(), sh[1], sh[2]);
                let psnr = metrics::psnr(img, &rec)?;
                // MS-SSIM needs all five scales to fit; small images get an
                // empty field instead of failing the whole run.
                let ssim = match metrics::ms_ssim(img, &rec) {
                    Ok(v) => {
                        sum_ssim += v;
                        ssim_count += 1;
                        format!("{v:.6}")
                    }
                    Err(Error::Contract(_)) => String::new(),
                    Err(e) => return Err(e),
                };
                report.push_str(&format!(
                    "{i},{},{bpp:.6},{psnr:.4},{ssim}\n",
                    res.bytes.len()
                ));
                sum_bpp += bpp;
                sum_psnr += psnr;
                curve.push((bpp, psnr));
            }
            let n = images.len() as f64;
            println!(
                "{} images: mean bpp {:.4}, mean PSNR {:.2} dB{}",
                images.len(),
                sum_bpp / n,
                sum_psnr / n,
                if ssim_count > 0 {
                    format!(", mean MS-SSIM {:.6}", sum_ssim / ssim_count as f64)
                } else {
                    String::new()
                }
            );
            if let Some(p) = anchor {
                let anchor_curve = read_curve(&p)?;
                let bd = metrics::bd_rate(&curve, &anchor_curve)?;
                println!("BD-rate vs anchor: {bd:+.2}%");
            }
            if let Some(p) = out {
                fs::write(&p, report)?;
                println!("report written to {}", p.display());
            }
            Ok(())
        }
        Cmd::AnalyzeSpectrum {
            corpus,
            model,
            out,
            patches,
            patch_size,
            seed,
        } => {
            let (m, _) = load_model(&model)?;
            let images = train::load_corpus::<f32>(&corpus)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut samples = Vec::with_capacity(patches);
            for _ in 0..patches {
                samples.push(train::sample_crop(&images, patch_size, &mut rng)?);
            }
            let rep = analysis::spectrum(&m, &samples)?;
            let mut f = fs::File::create(&out)?;
            analysis::write_spectrum_csv(&rep, &mut f)?;
            println!(
                "spectrum over {patches} {patch_size}x{patch_size} patches written to {}",
                out.display()
            );
            Ok(())
        }
        Cmd::VisualizeFilters { model, out } => {
            let (m, _) = load_model(&model)?;
            let rep = analysis::filters(&m);
            let mut f = fs::File::create(&out)?;
            analysis::write_filters_csv(&rep, &mut f)?;
            println!("filter magnitudes written to {}", out.display());
            Ok(())
        }
    }
}

/// Reads a (bpp, psnr) curve CSV, skipping non-numeric header lines.
fn read_curve(path: &Path) -> Result<Vec<(f64, f64)>, Error> {
    let text = fs::read_to_string(path)?;
    let mut out = Vec::new();
    for line in text.lines() {
        let mut it = line.split(',');
        let (Some(a), Some(b)) = (it.next(), it.next()) else {
            continue;
        };
        if let (Ok(r), Ok(q)) = (a.trim().parse::<f64>(), b.trim().parse::<f64>()) {
            out.push((r, q));
        }
    }
    if out.is_empty() {
        return Err(Error::Format(format!(
            "no numeric bpp,psnr rows in {}",
            path.display()
        )));
    }
    Ok(out)
}
