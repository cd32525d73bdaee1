//! Full codec model: transforms, hyper prior, and optional entropy model.
//!
//! Stage 1 trains the transforms with the hyper prior alone: the hyper
//! synthesis output directly provides a mean and log-scale per latent
//! channel. Stage 2 attaches the channel-wise autoregressive model, which
//! replaces those predictions with its own (fed by the same hyper output).
//! The configuration carries the lambda ladder so that bitstreams and
//! checkpoints can be checked for compatibility via a content hash.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::coder::factorized::FactorizedPrior;
use crate::error::{Error, Result};
use crate::tca::{Tca, TcaConfig, SIGMA_MAX, SIGMA_MIN};
use crate::tensor::{Element, Tensor};
use crate::transforms::{
    AnalysisTransform, HyperAnalysis, HyperSynthesis, SynthesisTransform, TransformConfig,
};

/// Rate-distortion weights of the standard ladder.
pub const DEFAULT_LAMBDAS: [f64; 6] = [0.0025, 0.0035, 0.0067, 0.0130, 0.0250, 0.0483];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CodecConfig {
    pub transform: TransformConfig,
    pub tca: TcaConfig,
    pub lambdas: Vec<f64>,
}

impl CodecConfig {
    pub fn full() -> Self {
        CodecConfig {
            transform: TransformConfig::full(),
            tca: TcaConfig::full(),
            lambdas: DEFAULT_LAMBDAS.to_vec(),
        }
    }

    pub fn toy() -> Self {
        CodecConfig {
            transform: TransformConfig::toy(),
            tca: TcaConfig::toy(),
            lambdas: DEFAULT_LAMBDAS.to_vec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tca.latent != self.transform.latent {
            return Err(Error::Config(format!(
                "latent width mismatch: transforms {} vs entropy model {}",
                self.transform.latent, self.tca.latent
            )));
        }
        if self.lambdas.is_empty() {
            return Err(Error::Config("empty lambda ladder".into()));
        }
        Ok(())
    }

    /// Content hash over the canonical JSON form; bitstreams embed it so a
    /// decode with a mismatched model fails cleanly.
    pub fn hash(&self) -> [u8; 32] {
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        h.finalize().into()
    }
}

pub struct FatLic<E: Element> {
    pub cfg: CodecConfig,
    pub g_a: AnalysisTransform<E>,
    pub g_s: SynthesisTransform<E>,
    pub h_a: HyperAnalysis<E>,
    pub h_s: HyperSynthesis<E>,
    pub prior: FactorizedPrior<E>,
    pub tca: Option<Tca<E>>,
    /// 1 = transforms + hyper prior, 2 = entropy model attached,
    /// 3 = entropy model attached and training rates rounded symbols.
    pub stage: u8,
}

impl<E: Element> FatLic<E> {
    /// Stage-1 model with deterministic seeded initialization.
    pub fn new(cfg: &CodecConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(FatLic {
            cfg: cfg.clone(),
            g_a: AnalysisTransform::new(&cfg.transform, &mut rng)?,
            g_s: SynthesisTransform::new(&cfg.transform, &mut rng)?,
            h_a: HyperAnalysis::new(&cfg.transform, &mut rng)?,
            h_s: HyperSynthesis::new(&cfg.transform, &mut rng)?,
            prior: FactorizedPrior::new(cfg.transform.hyper, &mut rng),
            tca: None,
            stage: 1,
        })
    }

    /// Attaches a freshly initialized entropy model and enters stage 2.
    pub fn attach_tca(&mut self, seed: u64) -> Result<()> {
        if self.tca.is_some() {
            return Err(Error::Contract("entropy model already attached".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        self.tca = Some(Tca::new(&self.cfg.tca, &mut rng)?);
        self.stage = 2;
        Ok(())
    }

    /// Mean and scale read directly from the hyper context (stage 1).
    /// `phi` is [2M, H, W] with channels interleaved per latent channel.
    pub fn hyper_params(&self, phi: &Tensor<E>) -> Result<(Tensor<E>, Tensor<E>)> {
        let m = self.cfg.transform.latent;
        let sh = phi.shape();
        if sh.len() != 3 || sh[0] != 2 * m {
            return Err(Error::Dim(format!(
                "hyper context must be [{}, H, W], got {sh:?}",
                2 * m
            )));
        }
        let (h, w) = (sh[1], sh[2]);
        let grouped = phi.reshape(&[m, 2, h * w]);
        let mu = grouped.slice_axis(1, 0, 1).reshape(&[m, h, w]);
        let sigma = grouped
            .slice_axis(1, 1, 1)
            .reshape(&[m, h, w])
            .clamp(E::from_f64(SIGMA_MIN.ln()), E::from_f64(SIGMA_MAX.ln()))
            .exp();
        Ok((mu, sigma))
    }

    pub fn parameters(&self) -> Vec<(String, Tensor<E>)> {
        let mut out = Vec::new();
        self.g_a.parameters("g_a", &mut out);
        self.g_s.parameters("g_s", &mut out);
        self.h_a.parameters("h_a", &mut out);
        self.h_s.parameters("h_s", &mut out);
        self.prior.parameters("prior", &mut out);
        if let Some(tca) = &self.tca {
            tca.parameters("tca", &mut out);
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_hash_is_stable_and_discriminating() {
        let a = CodecConfig::toy();
        let b = CodecConfig::toy();
        assert_eq!(a.hash(), b.hash());
        let mut c = CodecConfig::toy();
        c.transform.latent = 80;
        c.tca.latent = 80;
        assert_ne!(a.hash(), c.hash());
    }

    #[test]
    fn mismatched_latent_width_rejected() {
        let mut cfg = CodecConfig::toy();
        cfg.tca.latent = 20;
        assert!(FatLic::<f32>::new(&cfg, 0).is_err());
    }

    #[test]
    fn seeded_init_is_reproducible() {
        let cfg = CodecConfig::toy();
        let m1 = FatLic::<f32>::new(&cfg, 7).unwrap();
        let m2 = FatLic::<f32>::new(&cfg, 7).unwrap();
        let p1 = m1.parameters();
        let p2 = m2.parameters();
        assert_eq!(p1.len(), p2.len());
        for ((n1, t1), (n2, t2)) in p1.iter().zip(&p2) {
            assert_eq!(n1, n2);
            assert_eq!(t1.to_vec(), t2.to_vec(), "param {n1} differs");
        }
        let m3 = FatLic::<f32>::new(&cfg, 8).unwrap();
        assert_ne!(p1[0].1.to_vec(), m3.parameters()[0].1.to_vec());
    }

    #[test]
    fn attach_transitions_stage_and_extends_parameters() {
        let cfg = CodecConfig::toy();
        let mut m = FatLic::<f32>::new(&cfg, 1).unwrap();
        let before = m.parameters().len();
        m.attach_tca(99).unwrap();
        assert_eq!(m.stage, 2);
        assert!(m.parameters().len() > before);
        assert!(m.attach_tca(99).is_err());
    }

    #[test]
    fn hyper_params_split_layout() {
        let cfg = CodecConfig::toy();
        let m = FatLic::<f64>::new(&cfg, 2).unwrap();
        let latent = cfg.transform.latent;
        // phi with channel 2k = k (mean), channel 2k+1 = 0 (log sigma -> 1).
        let mut data = vec![0.0f64; 2 * latent * 4];
        for k in 0..latent {
            for p in 0..4 {
                data[(2 * k) * 4 + p] = k as f64;
            }
        }
        let phi = Tensor::new(data, &[2 * latent, 2, 2]);
        let (mu, sigma) = m.hyper_params(&phi).unwrap();
        assert_eq!(mu.shape(), &[latent, 2, 2]);
        for k in 0..latent {
            assert_eq!(mu.to_vec()[k * 4], k as f64);
            assert_eq!(sigma.to_vec()[k * 4], 1.0);
        }
    }
}
