//! Test support: finite-difference gradient oracle and seeded random tensors.
//!
//! The oracle uses forward evaluations only, so it stays independent of the
//! reverse-mode implementation it checks.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::tensor::{no_grad, Tensor};

/// Deterministic RNG for tests.
pub fn test_rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Uniform random tensor in [lo, hi).
pub fn rand_tensor(shape: &[usize], lo: f64, hi: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let data: Vec<f64> = (0..n).map(|_| rng.gen_range(lo..hi)).collect();
    Tensor::new(data, shape)
}

/// Central finite-difference check of `f`'s gradient w.r.t. every input.
///
/// Marks all inputs tracked, runs one backward pass, then compares each
/// analytic partial against `(f(x+h) - f(x-h)) / 2h`. Returns the maximum
/// relative error observed.
pub fn finite_diff_max_rel_err(
    inputs: &[Tensor<f64>],
    f: impl Fn(&[Tensor<f64>]) -> Tensor<f64>,
    h: f64,
) -> f64 {
    for t in inputs {
        t.zero_grad();
        let _ = t.clone().tracked();
    }
    let loss = f(inputs);
    loss.backward().expect("scalar loss");
    let grads: Vec<Vec<f64>> = inputs
        .iter()
        .map(|t| t.grad().unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let mut max_rel = 0.0f64;
    for (ti, t) in inputs.iter().enumerate() {
        for i in 0..t.len() {
            let orig = t.data()[i];
            t.data_mut()[i] = orig + h;
            let fp = no_grad(|| f(inputs)).item();
            t.data_mut()[i] = orig - h;
            let fm = no_grad(|| f(inputs)).item();
            t.data_mut()[i] = orig;
            let numeric = (fp - fm) / (2.0 * h);
            let analytic = grads[ti][i];
            let denom = analytic.abs().max(numeric.abs()).max(1e-3);
            let rel = (analytic - numeric).abs() / denom;
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    max_rel
}
