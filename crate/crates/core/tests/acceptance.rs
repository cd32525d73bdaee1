//! Acceptance gate: one test per criterion, each printing a single
//! `[acceptance] criterion NN ...: PASS|FAIL` line (run with
//! `cargo test --test acceptance -- --nocapture` to see them all).
//!
//! The training-dependent criteria (06-09) share one set of desk-scale
//! trained toy models, built once and passed between tests as serialized
//! checkpoints.

use std::sync::OnceLock;
use std::time::Instant;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use fatc::analysis;
use fatc::bitstream::Bitstream;
use fatc::checkpoint;
use fatc::codec::{self, PAD_MULTIPLE};
use fatc::coder::gaussian::GaussianCoder;
use fatc::coder::range::{RangeDecoder, RangeEncoder};
use fatc::fdwa::{fdwa_forward, window_merge, window_partition, FdwaParams};
use fatc::fmffn::{fmffn_forward, FmffnParams};
use fatc::metrics;
use fatc::model::{CodecConfig, FatLic};
use fatc::tca::{apply_latent_residual, zero_slices_from, Tca, TcaConfig};
use fatc::tensor::{fft2_block, ifft2_block, no_grad, Tensor};
use fatc::testutil::{finite_diff_max_rel_err, rand_tensor, test_rng};
use fatc::train::{self, train_stage, Adam, TrainConfig};
use fatc::transforms::{pad_to_multiple, Rbs, Rbu};

fn report(criterion: u32, name: &str, ok: bool, detail: &str) {
    println!(
        "[acceptance] criterion {criterion:02} ({name}): {} ({detail})",
        if ok { "PASS" } else { "FAIL" }
    );
}

// ---------------------------------------------------------------------------
// Criterion 1: lossless coding of one million random Gaussian symbols.
// ---------------------------------------------------------------------------

#[test]
fn criterion_01_lossless_range_coding() {
    let start = Instant::now();
    let n = 1_000_000usize;
    let draw = |rng: &mut ChaCha8Rng| -> (f64, f64, i64) {
        let mu: f64 = rng.gen_range(-30.0..30.0);
        let sigma = 10f64.powf(rng.gen_range(-1.39..2.0)); // ~0.04 .. 100
        let (u1, u2): (f64, f64) = (rng.gen_range(1e-12..1.0), rng.gen());
        let normal = (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos();
        let v = (mu + sigma * normal).round() as i64;
        (mu, sigma, v)
    };

    let mut rng = test_rng(1001);
    let mut coder = GaussianCoder::new();
    let mut enc = RangeEncoder::new();
    for _ in 0..n {
        let (mu, sigma, v) = draw(&mut rng);
        coder.encode(&mut enc, v, mu, sigma).unwrap();
    }
    let bytes = enc.finish();

    let mut rng = test_rng(1001);
    let mut dec = RangeDecoder::new(&bytes).unwrap();
    let mut mismatches = 0usize;
    for _ in 0..n {
        let (mu, sigma, v) = draw(&mut rng);
        if coder.decode(&mut dec, mu, sigma).unwrap() != v {
            mismatches += 1;
        }
    }
    let secs = start.elapsed().as_secs_f64();
    let ok = mismatches == 0 && secs < 10.0;
    report(
        1,
        "lossless coding",
        ok,
        &format!("{n} symbols, {mismatches} mismatches, {secs:.2} s, {} bytes", bytes.len()),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// Criterion 2: finite-difference gradient suite over primitives and blocks.
// ---------------------------------------------------------------------------

#[test]
fn criterion_02_gradient_suite() {
    let start = Instant::now();
    let tol = 1e-3;
    let mut worst: (f64, &'static str) = (0.0, "none");
    let track = |name: &'static str, err: f64, worst: &mut (f64, &'static str)| {
        if err > worst.0 {
            *worst = (err, name);
        }
    };
    let mut rng = test_rng(2002);

    // Elementwise activations.
    for shape in [&[5][..], &[3, 4][..], &[2, 3, 2][..]] {
        let x = rand_tensor(shape, -2.0, 2.0, &mut rng);
        let err = finite_diff_max_rel_err(
            &[x],
            |t| {
                t[0].gelu()
                    .tanh()
                    .add_scalar(2.0)
                    .ln()
                    .sigmoid()
                    .softplus()
                    .erf_op()
                    .leaky_relu(0.01)
                    .mean_all()
            },
            1e-5,
        );
        track("elementwise", err, &mut worst);
    }
    // Arithmetic combinations.
    for shape in [&[7][..], &[2, 5][..], &[3, 2, 2][..]] {
        let a = rand_tensor(shape, 0.5, 2.0, &mut rng);
        let b = rand_tensor(shape, 0.5, 2.0, &mut rng);
        let err = finite_diff_max_rel_err(
            &[a, b],
            |t| t[0].mul(&t[1]).add(&t[0].div(&t[1])).sub(&t[1]).exp().mean_all(),
            1e-5,
        );
        track("arithmetic", err, &mut worst);
    }
    // Matrix products.
    for (m, k, n) in [(3, 4, 5), (2, 7, 3), (6, 2, 4)] {
        let a = rand_tensor(&[m, k], -1.0, 1.0, &mut rng);
        let b = rand_tensor(&[k, n], -1.0, 1.0, &mut rng);
        let err = finite_diff_max_rel_err(
            &[a, b],
            |t| {
                let p = t[0].matmul(&t[1]).unwrap();
                p.mul(&p).mean_all()
            },
            1e-5,
        );
        track("matmul", err, &mut worst);
    }
    // Batched products with softmax.
    for (bsz, t_len) in [(2, 4), (3, 3), (1, 6)] {
        let q = rand_tensor(&[bsz, t_len, 2], -1.0, 1.0, &mut rng);
        let k = rand_tensor(&[bsz, t_len, 2], -1.0, 1.0, &mut rng);
        let err = finite_diff_max_rel_err(
            &[q, k],
            |t| {
                let logits = t[0].bmm(&t[1].permute(&[0, 2, 1])).unwrap();
                logits.softmax_last().bmm(&t[1]).unwrap().mean_all()
            },
            1e-5,
        );
        track("attention", err, &mut worst);
    }
    // Convolution (grouped) and normalization.
    for (cin, cout, g) in [(4, 6, 2), (3, 3, 1), (8, 4, 4)] {
        let x = rand_tensor(&[cin, 5, 5], -1.0, 1.0, &mut rng);
        let w = rand_tensor(&[cout, cin / g, 3, 3], -0.5, 0.5, &mut rng);
        let b = rand_tensor(&[cout], -0.1, 0.1, &mut rng);
        let err = finite_diff_max_rel_err(
            &[x, w, b],
            |t| {
                fatc::tensor::conv2d(&t[0], &t[1], Some(&t[2]), 1, 1, g)
                    .unwrap()
                    .gelu()
                    .mean_all()
            },
            1e-5,
        );
        track("conv2d", err, &mut worst);
    }
    for groups in [1, 2, 3] {
        let x = rand_tensor(&[6, 4, 4], -1.0, 1.0, &mut rng);
        let g = rand_tensor(&[6], 0.5, 1.5, &mut rng);
        let b = rand_tensor(&[6], -0.5, 0.5, &mut rng);
        let probe = rand_tensor(&[6, 4, 4], -1.0, 1.0, &mut rng);
        let err = finite_diff_max_rel_err(
            &[x, g, b, probe],
            |t| {
                fatc::tensor::group_norm(&t[0], groups, &t[1], &t[2], 1e-6)
                    .unwrap()
                    .mul(&t[3])
                    .mean_all()
            },
            1e-5,
        );
        track("group_norm", err, &mut worst);
    }
    // Spectral modulation.
    for (c, h) in [(2, 8), (1, 4), (3, 8)] {
        let x = rand_tensor(&[c, h, h], -1.0, 1.0, &mut rng);
        let wr = rand_tensor(&[c, 4, 4], -1.0, 1.0, &mut rng);
        let wi = rand_tensor(&[c, 4, 4], -1.0, 1.0, &mut rng);
        let probe = rand_tensor(&[c, h, h], -1.0, 1.0, &mut rng);
        let err = finite_diff_max_rel_err(
            &[x, wr, wi, probe],
            |t| {
                fatc::tensor::freq_modulate(&t[0], &t[1], &t[2], (4, 4))
                    .unwrap()
                    .mul(&t[3])
                    .mean_all()
            },
            1e-5,
        );
        track("freq_modulate", err, &mut worst);
    }
    // Movement ops.
    for shape in [&[2, 4, 4][..], &[3, 6, 2][..], &[1, 2, 8][..]] {
        let x = rand_tensor(shape, -1.0, 1.0, &mut rng);
        let probe = rand_tensor(shape, -1.0, 1.0, &mut rng);
        let err = finite_diff_max_rel_err(
            &[x, probe],
            |t| {
                t[0].roll2d(1, 1)
                    .pad2d_zero(1, 0, 2, 1)
                    .crop2d(1, 2, t[0].shape()[1], t[0].shape()[2])
                    .roll2d(-1, -1)
                    .mul(&t[1])
                    .mean_all()
            },
            1e-5,
        );
        track("movement", err, &mut worst);
    }

    // Composite: FDWA.
    for (c, heads, s, h, w) in [(8, 4, 1, 8, 8), (8, 4, 2, 8, 16), (16, 8, 1, 4, 12)] {
        let params = FdwaParams::<f64>::new(c, heads, s, true, &mut rng).unwrap();
        let x = rand_tensor(&[c, h, w], -1.0, 1.0, &mut rng);
        let probe = rand_tensor(&[c, h, w], -1.0, 1.0, &mut rng);
        let err = finite_diff_max_rel_err(
            &[x, probe],
            |t| fdwa_forward(&t[0], &params, false).unwrap().mul(&t[1]).mean_all(),
            1e-5,
        );
        track("fdwa", err, &mut worst);
    }
    // Composite: FMFFN.
    for (c, h, w) in [(3, 8, 8), (2, 4, 4), (4, 4, 8)] {
        let params = FmffnParams::<f64>::new(c, 2, 4, &mut rng).unwrap();
        for v in params.w_re.data_mut().iter_mut() {
            *v = rng.gen_range(0.5..1.5);
        }
        for v in params.w_im.data_mut().iter_mut() {
            *v = rng.gen_range(-0.5..0.5);
        }
        let x = rand_tensor(&[c, h, w], -1.0, 1.0, &mut rng);
        let probe = rand_tensor(&[c, h, w], -1.0, 1.0, &mut rng);
        let err = finite_diff_max_rel_err(
            &[x, probe],
            |t| fmffn_forward(&t[0], &params).unwrap().mul(&t[1]).mean_all(),
            1e-5,
        );
        track("fmffn", err, &mut worst);
    }
    // Composite: residual resampling blocks.
    for (cin, cout, h) in [(3, 4, 6), (2, 2, 4), (4, 3, 8)] {
        let rbs = Rbs::<f64>::new(cin, cout, &mut rng);
        let rbu = Rbu::<f64>::new(cout, cin, true, &mut rng);
        let x = rand_tensor(&[cin, h, h], -1.0, 1.0, &mut rng);
        let err = finite_diff_max_rel_err(
            &[x],
            |t| {
                let d = rbs.forward(&t[0]).unwrap();
                rbu.forward(&d).unwrap().mean_all()
            },
            1e-5,
        );
        track("rbs_rbu", err, &mut worst);
    }
    // Composite: channel-autoregressive entropy layer.
    for (latent, slices, r, hw) in [(4, 2, 1, 2), (6, 3, 2, 2), (8, 4, 1, 3)] {
        let cfg = TcaConfig {
            latent,
            n_slices: slices,
            layers: 1,
            r,
            heads: 1,
        };
        let tca = Tca::<f64>::new(&cfg, &mut rng).unwrap();
        // The final entropy-parameter stage is zero-initialized; randomize it
        // so the check exercises a non-degenerate gradient path.
        let mut tca_params = Vec::new();
        tca.parameters("tca", &mut tca_params);
        for (name, t) in &tca_params {
            if name.contains("ep3") {
                for v in t.data_mut().iter_mut() {
                    *v = rng.gen_range(-0.3..0.3);
                }
            }
        }
        let phi = rand_tensor(&[2 * latent, hw, hw], -0.5, 0.5, &mut rng);
        let y = rand_tensor(&[latent, hw, hw], -2.0, 2.0, &mut rng).ste_round();
        let probe = rand_tensor(&[latent, hw, hw], -1.0, 1.0, &mut rng);
        let err = finite_diff_max_rel_err(
            &[phi, probe],
            |t| {
                let p = tca.params(&t[0], &y).unwrap();
                p.mu.add(&p.sigma).add(&p.lrp).mul(&t[1]).mean_all()
            },
            1e-5,
        );
        track("tca_layer", err, &mut worst);
    }
    // Composite: differentiable rate estimate.
    for shape in [&[4, 2, 2][..], &[2, 3, 3][..], &[6, 2, 1][..]] {
        let y = rand_tensor(shape, -4.0, 4.0, &mut rng);
        let mu = rand_tensor(shape, -1.0, 1.0, &mut rng);
        let sraw = rand_tensor(shape, -0.5, 1.0, &mut rng);
        let err = finite_diff_max_rel_err(
            &[y, mu, sraw],
            |t| train::gaussian_bits(&t[0], &t[1], &t[2].exp()),
            1e-5,
        );
        track("rate_estimate", err, &mut worst);
    }

    let secs = start.elapsed().as_secs_f64();
    let ok = worst.0 < tol && secs < 300.0;
    report(
        2,
        "gradient suite",
        ok,
        &format!("worst rel-err {:.2e} in {}, {secs:.1} s", worst.0, worst.1),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// Criterion 3: slice causality of the autoregressive entropy model.
// ---------------------------------------------------------------------------

#[test]
fn criterion_03_causality() {
    let cfg = CodecConfig::toy();
    let mut model = FatLic::<f32>::new(&cfg, 3003).unwrap();
    model.attach_tca(3004).unwrap();
    let tca = model.tca.as_ref().unwrap();
    let ms = cfg.tca.slice_width();
    let mut rng = test_rng(3005);
    let mut violations = 0usize;
    for _ in 0..20 {
        let phi = Tensor::<f32>::rand_uniform(&[2 * cfg.tca.latent, 4, 4], -1.0, 1.0, &mut rng);
        let y = Tensor::<f32>::rand_uniform(&[cfg.tca.latent, 4, 4], -8.0, 8.0, &mut rng)
            .ste_round();
        let base = no_grad(|| tca.params(&phi, &y)).unwrap();
        for i in 1..cfg.tca.n_slices {
            // Perturb every slice >= i; params of slice i may only depend on
            // slices < i.
            let mut pert = y.to_vec();
            let hw = 16;
            for v in pert[i * ms * hw..].iter_mut() {
                *v += rng.gen_range(1.0..5.0f32).round();
            }
            let y2 = Tensor::new(pert, y.shape());
            let p2 = no_grad(|| tca.params(&phi, &y2)).unwrap();
            for (a, b) in [
                (&base.mu, &p2.mu),
                (&base.sigma, &p2.sigma),
                (&base.lrp, &p2.lrp),
            ] {
                let av = a.to_vec();
                let bv = b.to_vec();
                for j in i * ms * hw..(i + 1) * ms * hw {
                    if av[j].to_bits() != bv[j].to_bits() {
                        violations += 1;
                    }
                }
            }
        }
    }
    let ok = violations == 0;
    report(3, "causality", ok, &format!("{violations} non-causal values over 20 latents"));
    assert!(ok);
}

// ---------------------------------------------------------------------------
// Criterion 4: structural inverses.
// ---------------------------------------------------------------------------

#[test]
fn criterion_04_structural_inverses() {
    let mut rng = test_rng(4004);
    let mut ok = true;
    let mut detail = String::new();

    // Window partition/merge.
    for _ in 0..5 {
        let (wh, ww) = (rng.gen_range(1..5usize), rng.gen_range(1..5usize));
        let (nh, nw) = (rng.gen_range(1..4usize), rng.gen_range(1..4usize));
        let x = rand_tensor(&[3, wh * nh, ww * nw], -1.0, 1.0, &mut rng);
        let wins = window_partition(&x, wh, ww).unwrap();
        let back = window_merge(&wins, wh * nh, ww * nw).unwrap();
        if back.to_vec() != x.to_vec() {
            ok = false;
            detail.push_str("window merge not exact; ");
        }
    }
    // Shift / unshift.
    for _ in 0..5 {
        let x = rand_tensor(&[2, 6, 9], -1.0, 1.0, &mut rng);
        let (dy, dx) = (rng.gen_range(-5..6), rng.gen_range(-5..6));
        if x.roll2d(dy, dx).roll2d(-dy, -dx).to_vec() != x.to_vec() {
            ok = false;
            detail.push_str("roll not exact; ");
        }
    }
    // Block FFT / IFFT.
    let mut worst_fft = 0.0f64;
    for _ in 0..5 {
        let x = rand_tensor(&[2, 8, 16], -1.0, 1.0, &mut rng);
        let f = fft2_block(&x, (4, 8)).unwrap();
        let b = ifft2_block(&f, (4, 8)).unwrap();
        for (a, r) in x.to_vec().iter().zip(&b.re) {
            worst_fft = worst_fft.max((a - r).abs());
        }
        for i in &b.im {
            worst_fft = worst_fft.max(i.abs());
        }
    }
    if worst_fft > 1e-10 {
        ok = false;
    }
    // Slice split / concat.
    for _ in 0..5 {
        let x = rand_tensor(&[10, 3, 3], -1.0, 1.0, &mut rng);
        let parts: Vec<_> = (0..5).map(|i| x.slice_axis(0, 2 * i, 2)).collect();
        let back = Tensor::concat(&parts, 0);
        if back.to_vec() != x.to_vec() {
            ok = false;
            detail.push_str("slice concat not exact; ");
        }
    }
    report(
        4,
        "structural inverses",
        ok,
        &format!("fft max err {worst_fft:.2e}; {}", if detail.is_empty() { "exact" } else { &detail }),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// Criterion 5: encoder/decoder consistency on fuzzed images.
// ---------------------------------------------------------------------------

/// Reconstruction computed from model pieces only, mirroring the documented
/// decode semantics: an independent reference for the codec path.
fn direct_forward(model: &FatLic<f32>, img: &Tensor<f32>) -> Tensor<f32> {
    no_grad(|| {
        let (h0, w0) = (img.shape()[1], img.shape()[2]);
        let x = pad_to_multiple(img, PAD_MULTIPLE)?;
        let y = model.g_a.forward(&x)?;
        let z = model.h_a.forward(&y)?;
        let phi = model.h_s.forward(&z.ste_round())?;
        let v = y.ste_round();
        let cfg = &model.cfg.tca;
        let ms = cfg.slice_width();
        let tca = model.tca.as_ref().unwrap();
        let mut lrp_slices = Vec::new();
        for g in 0..cfg.n_slices {
            let p = tca.params(&phi, &zero_slices_from(&v, cfg, g))?;
            lrp_slices.push(p.lrp.slice_axis(0, g * ms, ms));
        }
        let lrp = Tensor::concat(&lrp_slices, 0);
        let y_hat = apply_latent_residual(&v, &lrp);
        let xr = model.g_s.forward(&y_hat)?;
        Ok::<_, fatc::Error>(xr.crop2d(0, 0, h0, w0).clamp(0.0, 1.0))
    })
    .unwrap()
}

#[test]
fn criterion_05_codec_consistency() {
    let cfg = CodecConfig::toy();
    let mut model = FatLic::<f32>::new(&cfg, 5005).unwrap();
    model.attach_tca(5006).unwrap();
    let mut rng = test_rng(5007);
    let mut mismatch_images = 0usize;
    let mut rate_failures = 0usize;
    let mut worst_slack = f64::NEG_INFINITY;
    for _ in 0..100 {
        let h = rng.gen_range(65..=192usize);
        let w = rng.gen_range(65..=192usize);
        let img = Tensor::<f32>::rand_uniform(&[3, h, w], 0.0, 1.0, &mut rng);
        let res = codec::encode_image(&model, 0, &img).unwrap();
        let dec = codec::decode_image(&model, &res.bytes).unwrap();
        let direct = direct_forward(&model, &img);
        let same = dec
            .to_vec()
            .iter()
            .zip(direct.to_vec().iter())
            .all(|(a, b)| a.to_bits() == b.to_bits());
        if !same {
            mismatch_images += 1;
        }
        // Coded payload (range-coded segments only) against the model
        // cross-entropy of the coded symbols.
        let bs = Bitstream::from_bytes(&res.bytes).unwrap();
        let payload_bits = 8.0
            * (bs.z_bytes.len() + bs.y_segments.iter().map(Vec::len).sum::<usize>()) as f64;
        let slack = payload_bits - (res.estimated_bits * 1.01 + 64.0);
        worst_slack = worst_slack.max(slack);
        if slack > 0.0 {
            rate_failures += 1;
        }
    }
    let ok = mismatch_images == 0 && rate_failures == 0;
    report(
        5,
        "codec consistency",
        ok,
        &format!(
            "100 images, {mismatch_images} reconstruction mismatches, {rate_failures} rate overruns, worst rate slack {worst_slack:.1} bits"
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// Shared trained artifacts for criteria 6-9.
// ---------------------------------------------------------------------------

struct Trained {
    main_ckpt: Vec<u8>,
    lo_ckpt: Vec<u8>,
    hi_ckpt: Vec<u8>,
    s1_early: f64,
    s1_late: f64,
    pre_attach: f64,
    post_attach: f64,
    train_secs: f64,
}

static TRAINED: OnceLock<Trained> = OnceLock::new();

/// Deterministic synthetic corpus: smooth 1/f-style waves plus oriented
/// edges, which gives the transforms both low- and high-frequency content.
fn corpus() -> Vec<Tensor<f32>> {
    let mut rng = test_rng(6006);
    let (h, w) = (256usize, 256usize);
    (0..6)
        .map(|_| {
            let mut comps = Vec::new();
            for _ in 0..12 {
                let fx: f64 = rng.gen_range(0.01..0.5);
                let fy: f64 = rng.gen_range(0.01..0.5);
                let amp = 0.25 / (fx.hypot(fy) * 8.0).max(1.0);
                let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                comps.push((fx, fy, amp, phase));
            }
            let edge_at = rng.gen_range(0.3..0.7) * w as f64;
            let edge_slope: f64 = rng.gen_range(-0.5..0.5);
            let mut data = Vec::with_capacity(3 * h * w);
            for c in 0..3 {
                let shift = c as f64 * 0.37;
                for i in 0..h {
                    for j in 0..w {
                        let mut v = 0.5;
                        for (fx, fy, amp, phase) in &comps {
                            v += amp * (fx * j as f64 + fy * i as f64 + phase + shift).sin();
                        }
                        if j as f64 > edge_at + edge_slope * i as f64 {
                            v += 0.18;
                        }
                        data.push(v.clamp(0.0, 1.0) as f32);
                    }
                }
            }
            Tensor::new(data, &[3, h, w])
        })
        .collect()
}

/// Held-out evaluation set: same image family as the corpus (so the models
/// are evaluated in distribution) but a different seed, and sized at the
/// training crop resolution, which is the resolution the desk-scale models
/// actually fit.
fn eval_set() -> Vec<Tensor<f32>> {
    let mut rng = test_rng(7007);
    let (h, w) = (64usize, 64usize);
    (0..10)
        .map(|_| {
            let mut comps = Vec::new();
            for _ in 0..12 {
                let fx: f64 = rng.gen_range(0.01..0.5);
                let fy: f64 = rng.gen_range(0.01..0.5);
                let amp = 0.25 / (fx.hypot(fy) * 8.0).max(1.0);
                let phase: f64 = rng.gen_range(0.0..std::f64::consts::TAU);
                comps.push((fx, fy, amp, phase));
            }
            let edge_at = rng.gen_range(0.3..0.7) * w as f64;
            let edge_slope: f64 = rng.gen_range(-0.5..0.5);
            let mut data = Vec::with_capacity(3 * h * w);
            for c in 0..3 {
                let shift = c as f64 * 0.37;
                for i in 0..h {
                    for j in 0..w {
                        let mut v = 0.5;
                        for (fx, fy, amp, phase) in &comps {
                            v += amp * (fx * j as f64 + fy * i as f64 + phase + shift).sin();
                        }
                        if j as f64 > edge_at + edge_slope * i as f64 {
                            v += 0.18;
                        }
                        data.push(v.clamp(0.0, 1.0) as f32);
                    }
                }
            }
            Tensor::new(data, &[3, h, w])
        })
        .collect()
}

fn mean_eval_distortion(model: &FatLic<f32>, imgs: &[Tensor<f32>]) -> f64 {
    imgs.iter()
        .map(|im| train::eval_distortion(model, im).unwrap())
        .sum::<f64>()
        / imgs.len() as f64
}

fn train_one(
    lambda_index: usize,
    stage1: usize,
    stage2: usize,
    seed: u64,
    corpus: &[Tensor<f32>],
) -> (FatLic<f32>, Vec<train::StepLog>, f64, f64) {
    let cfg = CodecConfig::toy();
    let tc = TrainConfig {
        lambda_index,
        lr: 3e-4,
        batch: 1,
        crop: 64,
        seed,
        ..TrainConfig::default()
    };
    let lambda = cfg.lambdas[lambda_index];
    let mut model = FatLic::<f32>::new(&cfg, seed).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Adam::new(tc.lr);
    let mut log = Vec::new();
    train_stage(&model, &mut opt, stage1, lambda, &tc, corpus, &mut rng, &mut log).unwrap();
    // Attach continuity is measured on training-distribution crops, where
    // the stage-1 hyper means are well fit and the switch from mean-centered
    // to plain rounding is a small perturbation.
    let mut crop_rng = ChaCha8Rng::seed_from_u64(9009);
    let crops: Vec<Tensor<f32>> = (0..24)
        .map(|_| train::sample_crop(corpus, 64, &mut crop_rng).unwrap())
        .collect();
    let pre = mean_eval_distortion(&model, &crops);
    model.attach_tca(seed + 1).unwrap();
    let post = mean_eval_distortion(&model, &crops);
    train_stage(&model, &mut opt, stage2, lambda, &tc, corpus, &mut rng, &mut log).unwrap();
    (model, log, pre, post)
}

/// Clones a trained model via its checkpoint bytes and fine-tunes it at a
/// different rate point in stage 3, where training rates the rounded
/// symbols the coder actually writes.
fn fine_tune(
    base: &FatLic<f32>,
    lambda_index: usize,
    steps: usize,
    seed: u64,
    corpus: &[Tensor<f32>],
) -> FatLic<f32> {
    let mut bytes = Vec::new();
    checkpoint::write(&mut bytes, base, lambda_index).unwrap();
    let (mut model, _) = load(&bytes);
    model.stage = 3;
    let tc = TrainConfig {
        lambda_index,
        lr: 3e-4,
        batch: 1,
        crop: 64,
        seed,
        ..TrainConfig::default()
    };
    let lambda = model.cfg.lambdas[lambda_index];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut opt = Adam::new(tc.lr);
    let mut log = Vec::new();
    train_stage(&model, &mut opt, steps, lambda, &tc, corpus, &mut rng, &mut log).unwrap();
    model
}

fn trained() -> &'static Trained {
    TRAINED.get_or_init(|| {
        let start = Instant::now();
        let corpus = corpus();
        let (main, log, pre, post) = train_one(3, 900, 60, 42, &corpus);
        // Moving averages of the stage-1 loss around step 100 and at the end.
        let s1: Vec<f64> = log.iter().filter(|e| e.stage == 1).map(|e| e.loss).collect();
        let s1_early = s1[90..110].iter().sum::<f64>() / 20.0;
        let s1_late = s1[s1.len() - 20..].iter().sum::<f64>() / 20.0;
        // Rate-point models branch off the shared trained weights and see the
        // same crop and noise stream (same seed), so the lambda weight is the
        // only difference between the two fine-tuning runs.
        let lo = fine_tune(&main, 0, 500, 43, &corpus);
        let hi = fine_tune(&main, 5, 500, 43, &corpus);
        let mut main_ckpt = Vec::new();
        checkpoint::write(&mut main_ckpt, &main, 3).unwrap();
        let mut lo_ckpt = Vec::new();
        checkpoint::write(&mut lo_ckpt, &lo, 0).unwrap();
        let mut hi_ckpt = Vec::new();
        checkpoint::write(&mut hi_ckpt, &hi, 5).unwrap();
        Trained {
            main_ckpt,
            lo_ckpt,
            hi_ckpt,
            s1_early,
            s1_late,
            pre_attach: pre,
            post_attach: post,
            train_secs: start.elapsed().as_secs_f64(),
        }
    })
}

fn load(bytes: &[u8]) -> (FatLic<f32>, usize) {
    checkpoint::read::<f32, _>(&mut &bytes[..]).unwrap()
}

// ---------------------------------------------------------------------------
// Criterion 6: desk-scale stage-1 training and stage-2 attachment.
// ---------------------------------------------------------------------------

#[test]
fn criterion_06_toy_training() {
    let t = trained();
    let drop = 1.0 - t.s1_late / t.s1_early;
    let attach_gap = (t.post_attach - t.pre_attach).abs() / t.pre_attach;
    let ok = drop >= 0.30 && t.train_secs < 1800.0 && attach_gap <= 0.01;
    report(
        6,
        "toy training",
        ok,
        &format!(
            "stage-1 loss drop {:.1}% (early {:.3} -> late {:.3}), attach distortion gap {:.3}%, all training {:.0} s",
            drop * 100.0,
            t.s1_early,
            t.s1_late,
            attach_gap * 100.0,
            t.train_secs
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// Criterion 7: lambda monotonicity on a held-out set.
// ---------------------------------------------------------------------------

#[test]
fn criterion_07_lambda_monotonicity() {
    let t = trained();
    let (lo, _) = load(&t.lo_ckpt);
    let (hi, _) = load(&t.hi_ckpt);
    let eval = eval_set();
    let measure = |model: &FatLic<f32>, lam: usize| {
        let mut bpp = 0.0;
        let mut mse = 0.0;
        for im in &eval {
            let res = codec::encode_image(model, lam, im).unwrap();
            let sh = im.shape();
            bpp += metrics::bpp(res.bytes.len(), sh[1], sh[2]);
            mse += train::eval_distortion(model, im).unwrap();
        }
        (bpp / eval.len() as f64, mse / eval.len() as f64)
    };
    let (bpp_lo, mse_lo) = measure(&lo, 0);
    let (bpp_hi, mse_hi) = measure(&hi, 5);
    let ok = bpp_hi > bpp_lo && mse_hi < mse_lo;
    report(
        7,
        "lambda monotonicity",
        ok,
        &format!(
            "low lambda: {bpp_lo:.4} bpp / mse {mse_lo:.2}; high lambda: {bpp_hi:.4} bpp / mse {mse_hi:.2}"
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// Criterion 8: spectral decomposition property of the trained transforms.
// ---------------------------------------------------------------------------

#[test]
fn criterion_08_spectral_property() {
    let t = trained();
    let (main, _) = load(&t.main_ckpt);
    let corpus = corpus();
    let mut rng = test_rng(8008);
    let mut patches = Vec::new();
    for _ in 0..24 {
        patches.push(train::sample_crop(&corpus, 256, &mut rng).unwrap());
    }
    let rep = analysis::spectrum(&main, &patches).unwrap();
    // Group order: LL, HH, HL, LH.
    let g = &rep.analysis;
    let ll_central = g[0].central_energy_fraction(3);
    let hh_central = g[1].central_energy_fraction(3);
    let hl_bias = g[2].axis_spread(0) - g[2].axis_spread(1);
    let lh_bias = g[3].axis_spread(0) - g[3].axis_spread(1);
    let ok = ll_central > hh_central && hl_bias * lh_bias < 0.0;
    report(
        8,
        "spectral property",
        ok,
        &format!(
            "LL central {ll_central:.3} vs HH {hh_central:.3}; axis bias HL {hl_bias:+.3} / LH {lh_bias:+.3}"
        ),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// Criterion 9: learned-filter property across rate points.
// ---------------------------------------------------------------------------

#[test]
fn criterion_09_filter_property() {
    let t = trained();
    let (lo, _) = load(&t.lo_ckpt);
    let (hi, _) = load(&t.hi_ckpt);
    let ring = |model: &FatLic<f32>| {
        let rep = analysis::filters(model);
        let grids = &rep.analysis;
        grids.iter().map(|g| g.outer_ring_mean(g.n / 4)).sum::<f64>() / grids.len() as f64
    };
    let (lo_ring, hi_ring) = (ring(&lo), ring(&hi));
    let ok = hi_ring > lo_ring;
    report(
        9,
        "filter property",
        ok,
        &format!("outer-ring |W|: high lambda {hi_ring:.6} vs low lambda {lo_ring:.6}"),
    );
    assert!(ok);
}

// ---------------------------------------------------------------------------
// Criterion 10: BD-rate calculator against an independent oracle.
// ---------------------------------------------------------------------------

#[test]
fn criterion_10_bd_rate_oracle() {
    // Independent oracle: exact Vandermonde cubic through 4 points plus
    // Simpson quadrature.
    fn oracle(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
        fn fit(c: &[(f64, f64)]) -> [f64; 4] {
            let mut m = [[0.0f64; 5]; 4];
            for (r, &(rate, q)) in c.iter().enumerate() {
                for p in 0..4 {
                    m[r][p] = q.powi(p as i32);
                }
                m[r][4] = rate.log10();
            }
            for col in 0..4 {
                let piv = (col..4)
                    .max_by(|&i, &j| m[i][col].abs().total_cmp(&m[j][col].abs()))
                    .unwrap();
                m.swap(col, piv);
                for r in 0..4 {
                    if r != col {
                        let f = m[r][col] / m[col][col];
                        for k in 0..5 {
                            m[r][k] -= f * m[col][k];
                        }
                    }
                }
            }
            [m[0][4] / m[0][0], m[1][4] / m[1][1], m[2][4] / m[2][2], m[3][4] / m[3][3]]
        }
        let (pa, pb) = (fit(a), fit(b));
        let eval = |p: &[f64; 4], x: f64| p[0] + p[1] * x + p[2] * x * x + p[3] * x * x * x;
        let lo = a.iter().map(|p| p.1).fold(f64::INFINITY, f64::min).max(
            b.iter().map(|p| p.1).fold(f64::INFINITY, f64::min),
        );
        let hi = a.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max).min(
            b.iter().map(|p| p.1).fold(f64::NEG_INFINITY, f64::max),
        );
        let n = 8192;
        let step = (hi - lo) / n as f64;
        let mut integral = 0.0;
        for i in 0..n {
            let x0 = lo + i as f64 * step;
            let f = |x: f64| eval(&pa, x) - eval(&pb, x);
            integral += step / 6.0 * (f(x0) + 4.0 * f(x0 + step / 2.0) + f(x0 + step));
        }
        (10f64.powf(integral / (hi - lo)) - 1.0) * 100.0
    }

    let base = vec![(0.2, 30.0), (0.4, 33.0), (0.8, 36.5), (1.6, 40.0)];
    let doubled: Vec<_> = base.iter().map(|&(r, q)| (2.0 * r, q)).collect();
    let skew = vec![(0.25, 30.4), (0.5, 33.8), (0.9, 36.1), (1.7, 39.7)];

    let mut ok = true;
    let mut detail = String::new();
    // Closed forms.
    let z = metrics::bd_rate(&base, &base).unwrap();
    if z.abs() > 1e-9 {
        ok = false;
    }
    let d = metrics::bd_rate(&doubled, &base).unwrap();
    if (d - 100.0).abs() > 1e-6 {
        ok = false;
    }
    detail.push_str(&format!("identical {z:.2e}%, doubled {d:.6}%"));
    // Oracle pairs.
    for (a, b) in [(&base, &doubled), (&base, &skew), (&skew, &doubled)] {
        let got = metrics::bd_rate(a, b).unwrap();
        let want = oracle(a, b);
        let rel = (got - want).abs() / want.abs().max(1e-12);
        detail.push_str(&format!(", pair err {rel:.2e}"));
        if rel > 1e-4 {
            ok = false;
        }
    }
    report(10, "bd-rate oracle", ok, &detail);
    assert!(ok);
}
