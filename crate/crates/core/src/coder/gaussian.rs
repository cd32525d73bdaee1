//! Quantized Gaussian cumulative tables for the range coder.
//!
//! Scales are snapped up to one of 64 log-spaced levels in
//! [`SIGMA_MIN`, `SIGMA_MAX`] and the fractional part of the mean to one of 16
//! linear offsets in [-0.5, 0.5]; tables are cached per (scale, offset) pair,
//! so coding a stream builds at most 1024 tables. A symbol covers one integer
//! in a +/-6 sigma span (clamped to [2, 1024] half-width) around the rounded
//! mean; everything outside is an escape symbol followed by a signed
//! Exp-Golomb tail.
//!
//! Quantization adds `i` to the scaled cumulative at boundary `i`, which
//! keeps the table strictly monotone and gives every symbol at least one
//! count while preserving the end points 0 and 65536 exactly.

use std::collections::HashMap;
use std::rc::Rc;

use crate::coder::range::{RangeDecoder, RangeEncoder, PROB_SCALE};
use crate::error::{Error, Result};
use crate::tca::{SIGMA_MAX, SIGMA_MIN};

pub const SCALE_LEVELS: usize = 64;
pub const OFFSET_LEVELS: usize = 16;
const MAX_HALF: i64 = 1024;

/// The 64 log-spaced scale levels.
pub fn scale_levels() -> Vec<f64> {
    let (lo, hi) = (SIGMA_MIN.ln(), SIGMA_MAX.ln());
    (0..SCALE_LEVELS)
        .map(|i| (lo + (hi - lo) * i as f64 / (SCALE_LEVELS - 1) as f64).exp())
        .collect()
}

/// Cumulative table over integers `kmin..=kmax` plus a trailing escape.
pub struct CdfTable {
    pub kmin: i64,
    pub cdf: Vec<u32>,
}

impl CdfTable {
    /// Builds the quantized table for N(`delta`, `sigma`) over a +/-6 sigma
    /// span around zero.
    pub fn gaussian(delta: f64, sigma: f64) -> Self {
        let half = ((6.0 * sigma).ceil() as i64).clamp(2, MAX_HALF);
        let kmin = -half;
        let span = (2 * half + 1) as usize;
        let nsym = span + 1;
        let inv = 1.0 / (sigma * std::f64::consts::SQRT_2);
        let cum = |edge: f64| -> f64 {
            let z = edge - delta;
            if z < -6.0 * sigma {
                0.0
            } else if z > 6.0 * sigma {
                1.0
            } else {
                0.5 * (1.0 + statrs::function::erf::erf(z * inv))
            }
        };
        let f_lo = cum(kmin as f64 - 0.5);
        let scale = (PROB_SCALE - nsym as u32) as f64;
        let mut cdf = Vec::with_capacity(nsym + 1);
        cdf.push(0);
        for i in 1..=span {
            let b = (cum((kmin + i as i64) as f64 - 0.5) - f_lo).clamp(0.0, 1.0);
            cdf.push((b * scale).round() as u32 + i as u32);
        }
        cdf.push(PROB_SCALE);
        CdfTable { kmin, cdf }
    }

    fn kmax(&self) -> i64 {
        self.kmin + (self.cdf.len() as i64 - 3)
    }

    fn escape_sym(&self) -> usize {
        self.cdf.len() - 2
    }

    fn tail_code(&self, v: i64) -> u64 {
        if v > self.kmax() {
            2 * (v - self.kmax() - 1) as u64
        } else {
            2 * (self.kmin - v - 1) as u64 + 1
        }
    }

    pub fn encode(&self, enc: &mut RangeEncoder, v: i64) {
        if v >= self.kmin && v <= self.kmax() {
            enc.encode_symbol((v - self.kmin) as usize, &self.cdf);
        } else {
            enc.encode_symbol(self.escape_sym(), &self.cdf);
            enc.encode_eg(self.tail_code(v));
        }
    }

    pub fn decode(&self, dec: &mut RangeDecoder) -> i64 {
        let sym = dec.decode_symbol(&self.cdf);
        if sym < self.escape_sym() {
            self.kmin + sym as i64
        } else {
            let u = dec.decode_eg();
            if u % 2 == 0 {
                self.kmax() + 1 + (u / 2) as i64
            } else {
                self.kmin - 1 - (u / 2) as i64
            }
        }
    }

    /// Exact bit cost the coder pays for `v` (escape tail bits included).
    pub fn bits(&self, v: i64) -> f64 {
        let sym = if v >= self.kmin && v <= self.kmax() {
            (v - self.kmin) as usize
        } else {
            self.escape_sym()
        };
        let p = (self.cdf[sym + 1] - self.cdf[sym]) as f64 / PROB_SCALE as f64;
        let mut bits = -p.log2();
        if sym == self.escape_sym() {
            let n = 64 - (self.tail_code(v) + 1).leading_zeros();
            bits += (2 * n - 1) as f64;
        }
        bits
    }
}

/// Table cache keyed by quantized (scale, offset).
#[derive(Default)]
pub struct GaussianCoder {
    levels: Vec<f64>,
    cache: HashMap<(u8, u8), Rc<CdfTable>>,
}

impl GaussianCoder {
    pub fn new() -> Self {
        GaussianCoder {
            levels: scale_levels(),
            cache: HashMap::new(),
        }
    }

    /// Rounded mean plus the table for the residual `v - round(mu)`.
    pub fn table(&mut self, mu: f64, sigma: f64) -> Result<(i64, Rc<CdfTable>)> {
        if !(sigma >= SIGMA_MIN * 0.999) {
            return Err(Error::Contract(format!(
                "gaussian coder: sigma {sigma} below minimum {SIGMA_MIN}"
            )));
        }
        let sigma = sigma.min(SIGMA_MAX);
        let s_idx = self
            .levels
            .iter()
            .position(|&l| l >= sigma * 0.999_999)
            .unwrap_or(SCALE_LEVELS - 1) as u8;
        let mu_round = round_half_away(mu);
        let delta = mu - mu_round as f64;
        let o_idx = ((delta + 0.5) * (OFFSET_LEVELS - 1) as f64).round() as u8;
        let table = self
            .cache
            .entry((s_idx, o_idx))
            .or_insert_with(|| {
                let dq = o_idx as f64 / (OFFSET_LEVELS - 1) as f64 - 0.5;
                Rc::new(CdfTable::gaussian(dq, scale_levels()[s_idx as usize]))
            })
            .clone();
        Ok((mu_round, table))
    }

    /// Encodes the integer `v` under N(mu, sigma).
    pub fn encode(&mut self, enc: &mut RangeEncoder, v: i64, mu: f64, sigma: f64) -> Result<()> {
        let (c, t) = self.table(mu, sigma)?;
        t.encode(enc, v - c);
        Ok(())
    }

    pub fn decode(&mut self, dec: &mut RangeDecoder, mu: f64, sigma: f64) -> Result<i64> {
        let (c, t) = self.table(mu, sigma)?;
        Ok(c + t.decode(dec))
    }

    /// Exact coder bit cost for `v`.
    pub fn bits(&mut self, v: i64, mu: f64, sigma: f64) -> Result<f64> {
        let (c, t) = self.table(mu, sigma)?;
        Ok(t.bits(v - c))
    }
}

/// Rounds half away from zero, the codec-wide quantization convention.
pub fn round_half_away(v: f64) -> i64 {
    v.round() as i64
}
