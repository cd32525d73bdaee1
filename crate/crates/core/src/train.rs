//! Desk-scale rate-distortion training.
//!
//! Distortion uses straight-through rounding throughout. Stage 1 trains
//! transforms and hyper prior with mean-centered rounding
//! (`mu + round(y - mu)`) and rates additive-uniform-noise latents; stage 2
//! attaches the autoregressive entropy model and switches to plain rounding,
//! matching what the coder emits; stage 3 is a low-learning-rate polish that
//! also rates the rounded symbols themselves (through the straight-through
//! estimator), closing the gap between the noise proxy and coded bits.
//! The loss is `bpp + lambda * mse` with the squared error taken on the
//! 0..255 pixel scale.

use std::io::Write as IoWrite;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::model::FatLic;
use crate::tca::apply_latent_residual;
use crate::tensor::{no_grad, Element, Tensor};

const LN2: f64 = std::f64::consts::LN_2;

/// Total bits to code `y` (noisy or rounded) under elementwise N(mu, sigma)
/// with unit bins. Differentiable in all three arguments.
pub fn gaussian_bits<E: Element>(
    y: &Tensor<E>,
    mu: &Tensor<E>,
    sigma: &Tensor<E>,
) -> Tensor<E> {
    let sqrt2 = E::from_f64(std::f64::consts::SQRT_2);
    let d = y.sub(mu);
    let denom = sigma.scale(sqrt2);
    let up = d.add_scalar(E::from_f64(0.5)).div(&denom).erf_op();
    let dn = d.add_scalar(E::from_f64(-0.5)).div(&denom).erf_op();
    let p = up.sub(&dn).scale(E::from_f64(0.5)).clamp_min(E::from_f64(1e-9));
    p.ln().sum_all().scale(E::from_f64(-1.0 / LN2))
}

/// One training step's scalar diagnostics.
#[derive(Debug, Clone)]
pub struct StepLog {
    pub step: usize,
    pub stage: u8,
    pub bpp: f64,
    pub distortion: f64,
    pub loss: f64,
}

/// Rate-distortion forward pass for one image; returns the scalar loss and
/// (bpp, mse) diagnostics.
pub fn rd_forward<E: Element>(
    model: &FatLic<E>,
    img: &Tensor<E>,
    lambda: f64,
    rng: &mut ChaCha8Rng,
) -> Result<(Tensor<E>, f64, f64)> {
    let (h, w) = (img.shape()[1], img.shape()[2]);
    let n_pixels = (h * w) as f64;
    let y = model.g_a.forward(img)?;
    let z = model.h_a.forward(&y)?;

    // Stages 1 and 2 relax quantization to additive uniform noise for the
    // rate term; stage 3 rates the rounded symbols the coder actually
    // writes (through the straight-through estimator), which removes the
    // train/deploy rate mismatch during final fine-tuning.
    let rounded_rate = model.stage == 3;
    let z_hat = z.ste_round();
    let z_for_rate = if rounded_rate {
        z_hat.clone()
    } else {
        z.add(&Tensor::rand_uniform(z.shape(), -0.5, 0.5, rng))
    };
    let z_bits = model
        .prior
        .likelihood(&z_for_rate)?
        .ln()
        .sum_all()
        .scale(E::from_f64(-1.0 / LN2));
    let phi = model.h_s.forward(&z_hat)?;

    let (y_bits, y_hat) = match &model.tca {
        None => {
            let (mu, sigma) = model.hyper_params(&phi)?;
            let y_for_rate = if rounded_rate {
                mu.add(&y.sub(&mu).ste_round())
            } else {
                y.add(&Tensor::rand_uniform(y.shape(), -0.5, 0.5, rng))
            };
            let bits = gaussian_bits(&y_for_rate, &mu, &sigma);
            let y_hat = mu.add(&y.sub(&mu).ste_round());
            (bits, y_hat)
        }
        Some(tca) => {
            let y_round = y.ste_round();
            let p = tca.params(&phi, &y_round)?;
            let y_for_rate = if rounded_rate {
                y_round.clone()
            } else {
                y.add(&Tensor::rand_uniform(y.shape(), -0.5, 0.5, rng))
            };
            let bits = gaussian_bits(&y_for_rate, &p.mu, &p.sigma);
            (bits, apply_latent_residual(&y_round, &p.lrp))
        }
    };

    let xr = model.g_s.forward(&y_hat)?;
    let err = xr.sub(img).scale(E::from_f64(255.0));
    let mse = err.mul(&err).mean_all();
    let bits = y_bits.add(&z_bits);
    let bpp = bits.scale(E::from_f64(1.0 / n_pixels));
    let loss = bpp.add(&mse.scale(E::from_f64(lambda)));
    let bpp_v = bpp.item().as_f64();
    let mse_v = mse.item().as_f64();
    Ok((loss, bpp_v, mse_v))
}

/// Deterministic evaluation distortion (MSE on the 0..255 scale) using the
/// codec's actual rounding for the current stage.
pub fn eval_distortion<E: Element>(model: &FatLic<E>, img: &Tensor<E>) -> Result<f64> {
    no_grad(|| {
        let y = model.g_a.forward(img)?;
        let z = model.h_a.forward(&y)?;
        let phi = model.h_s.forward(&z.ste_round())?;
        let y_hat = match &model.tca {
            None => {
                let (mu, _) = model.hyper_params(&phi)?;
                mu.add(&y.sub(&mu).ste_round())
            }
            Some(tca) => {
                let y_round = y.ste_round();
                let p = tca.params(&phi, &y_round)?;
                apply_latent_residual(&y_round, &p.lrp)
            }
        };
        let xr = model.g_s.forward(&y_hat)?;
        let err = xr.sub(img).scale(E::from_f64(255.0));
        Ok(err.mul(&err).mean_all().item().as_f64())
    })
}

/// Adam optimizer (no weight decay).
pub struct Adam<E: Element> {
    pub lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: u64,
    state: std::collections::HashMap<String, (Vec<f64>, Vec<f64>)>,
    _marker: std::marker::PhantomData<E>,
}

impl<E: Element> Adam<E> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            t: 0,
            state: std::collections::HashMap::new(),
            _marker: std::marker::PhantomData,
        }
    }

    pub fn step(&mut self, params: &[(String, Tensor<E>)]) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p) in params {
            let Some(g) = p.grad() else { continue };
            let (m, v) = self
                .state
                .entry(name.clone())
                .or_insert_with(|| (vec![0.0; p.len()], vec![0.0; p.len()]));
            let mut data = p.data_mut();
            for i in 0..data.len() {
                let gi = g[i].as_f64();
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * gi;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * gi * gi;
                let update = self.lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + self.eps);
                data[i] = data[i] - E::from_f64(update);
            }
        }
    }

    pub fn zero_grad(&self, params: &[(String, Tensor<E>)]) {
        for (_, p) in params {
            p.zero_grad();
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub lambda_index: usize,
    pub stage1_steps: usize,
    pub stage2_steps: usize,
    pub stage3_steps: usize,
    pub lr: f64,
    pub stage3_lr: f64,
    pub batch: usize,
    pub crop: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lambda_index: 3,
            stage1_steps: 5000,
            stage2_steps: 3000,
            stage3_steps: 1000,
            lr: 1e-4,
            stage3_lr: 1e-5,
            batch: 2,
            crop: 64,
            seed: 0,
        }
    }
}

/// Samples a random crop with extents `crop` from one corpus image.
pub fn sample_crop<E: Element>(
    corpus: &[Tensor<E>],
    crop: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<E>> {
    if corpus.is_empty() {
        return Err(Error::Config("empty training corpus".into()));
    }
    let img = &corpus[rng.gen_range(0..corpus.len())];
    let (h, w) = (img.shape()[1], img.shape()[2]);
    if h < crop || w < crop {
        return Err(Error::Config(format!(
            "corpus image {h}x{w} smaller than crop {crop}"
        )));
    }
    let top = rng.gen_range(0..=h - crop);
    let left = rng.gen_range(0..=w - crop);
    Ok(img.crop2d(top, left, crop, crop).detach())
}

/// Runs `steps` optimizer steps on the model's current stage.
pub fn train_stage<E: Element>(
    model: &FatLic<E>,
    opt: &mut Adam<E>,
    steps: usize,
    lambda: f64,
    cfg: &TrainConfig,
    corpus: &[Tensor<E>],
    rng: &mut ChaCha8Rng,
    log: &mut Vec<StepLog>,
) -> Result<()> {
    let params = model.parameters();
    for step in 0..steps {
        opt.zero_grad(&params);
        let mut losses = Vec::with_capacity(cfg.batch);
        let mut bpp_acc = 0.0;
        let mut mse_acc = 0.0;
        for _ in 0..cfg.batch {
            let img = sample_crop(corpus, cfg.crop, rng)?;
            let (loss, bpp, mse) = rd_forward(model, &img, lambda, rng)?;
            losses.push(loss);
            bpp_acc += bpp / cfg.batch as f64;
            mse_acc += mse / cfg.batch as f64;
        }
        let total = losses
            .iter()
            .skip(1)
            .fold(losses[0].clone(), |a, b| a.add(b))
            .scale(E::from_f64(1.0 / cfg.batch as f64));
        total.backward()?;
        let loss_v = total.item().as_f64();
        opt.step(&params);
        let entry = StepLog {
            step,
            stage: model.stage,
            bpp: bpp_acc,
            distortion: mse_acc,
            loss: loss_v,
        };
        log.push(entry);
    }
    Ok(())
}

/// Full staged training. Writes a `step,stage,bpp,distortion,loss` CSV to
/// `sink` when given.
pub fn train<E: Element>(
    model: &mut FatLic<E>,
    cfg: &TrainConfig,
    corpus: &[Tensor<E>],
    sink: Option<&mut dyn IoWrite>,
) -> Result<Vec<StepLog>> {
    let lambda = *model
        .cfg
        .lambdas
        .get(cfg.lambda_index)
        .ok_or_else(|| Error::Config("lambda index out of range".into()))?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut log = Vec::new();
    let mut opt = Adam::new(cfg.lr);
    if cfg.stage1_steps > 0 {
        train_stage(
            model,
            &mut opt,
            cfg.stage1_steps,
            lambda,
            cfg,
            corpus,
            &mut rng,
            &mut log,
        )?;
    }
    if cfg.stage2_steps > 0 {
        if model.tca.is_none() {
            model.attach_tca(cfg.seed.wrapping_add(1))?;
        }
        train_stage(
            model,
            &mut opt,
            cfg.stage2_steps,
            lambda,
            cfg,
            corpus,
            &mut rng,
            &mut log,
        )?;
    }
    if cfg.stage3_steps > 0 {
        model.stage = 3;
        let mut opt3 = Adam::new(cfg.stage3_lr);
        train_stage(
            model,
            &mut opt3,
            cfg.stage3_steps,
            lambda,
            cfg,
            corpus,
            &mut rng,
            &mut log,
        )?;
    }
    if let Some(s) = sink {
        writeln!(s, "step,stage,bpp,distortion,loss")?;
        for e in &log {
            writeln!(
                s,
                "{},{},{:.6},{:.6},{:.6}",
                e.step, e.stage, e.bpp, e.distortion, e.loss
            )?;
        }
    }
    Ok(log)
}

/// Loads every PNG in a directory as a training image.
pub fn load_corpus<E: Element>(dir: &std::path::Path) -> Result<Vec<Tensor<E>>> {
    let mut out = Vec::new();
    let mut entries: Vec<_> = std::fs::read_dir(dir)?
        .collect::<std::io::Result<Vec<_>>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| {
            p.extension()
                .map(|e| e.eq_ignore_ascii_case("png"))
                .unwrap_or(false)
        })
        .collect();
    entries.sort();
    for p in entries {
        out.push(crate::codec::load_image(&p)?);
    }
    if out.is_empty() {
        return Err(Error::Config(format!("no PNG images in {}", dir.display())));
    }
    Ok(out)
}
