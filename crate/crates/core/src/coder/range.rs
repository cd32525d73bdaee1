//! Byte-oriented range coder with carry handling.
//!
//! 32-bit range, 64-bit low with deferred carry propagation through a cache
//! byte. Symbol probabilities are 16-bit cumulative frequency tables
//! (`cdf[0] = 0`, `cdf[n] = 65536`, strictly increasing). Encoder and decoder
//! renormalize identically, so a decode of an encode is bitwise lossless.
//! Raw ("bypass") bits and Exp-Golomb coded integers share the same state.

use crate::error::{Error, Result};

pub const PROB_BITS: u32 = 16;
pub const PROB_SCALE: u32 = 1 << PROB_BITS;
const TOP: u32 = 1 << 24;

pub struct RangeEncoder {
    low: u64,
    range: u32,
    cache: u8,
    cache_size: u64,
    out: Vec<u8>,
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low > 0xFFFF_FFFF {
            let carry = (self.low >> 32) as u8;
            self.out.push(self.cache.wrapping_add(carry));
            for _ in 1..self.cache_size {
                self.out.push(0xFFu8.wrapping_add(carry));
            }
            self.cache = (self.low >> 24) as u8;
            self.cache_size = 0;
        }
        self.cache_size += 1;
        self.low = (self.low << 8) & 0xFFFF_FFFF;
    }

    fn encode_span(&mut self, cum: u32, freq: u32) {
        debug_assert!(freq > 0 && cum + freq <= PROB_SCALE);
        let r = self.range >> PROB_BITS;
        self.low += cum as u64 * r as u64;
        self.range = r * freq;
        while self.range < TOP {
            self.shift_low();
            self.range <<= 8;
        }
    }

    /// Encodes symbol `sym` under the cumulative table `cdf`.
    pub fn encode_symbol(&mut self, sym: usize, cdf: &[u32]) {
        assert!(sym + 1 < cdf.len(), "symbol out of table range");
        self.encode_span(cdf[sym], cdf[sym + 1] - cdf[sym]);
    }

    /// Encodes `n` raw bits of `v`, most significant first.
    pub fn encode_bits(&mut self, v: u64, n: u32) {
        for i in (0..n).rev() {
            let bit = ((v >> i) & 1) as u32;
            self.encode_span(bit << (PROB_BITS - 1), PROB_SCALE / 2);
        }
    }

    /// Exp-Golomb code for an unsigned integer.
    pub fn encode_eg(&mut self, v: u64) {
        let n = 64 - (v + 1).leading_zeros();
        self.encode_bits(0, n - 1);
        self.encode_bits(v + 1, n);
    }

    pub fn finish(mut self) -> Vec<u8> {
        // Any value in [low, low + range) resolves the final symbol. Round
        // low up to the coarsest power-of-two grid still inside the interval
        // so the flushed value ends in zero bytes, which are redundant.
        let k = 31 - self.range.leading_zeros();
        let step = 1u64 << k;
        self.low = (self.low + step - 1) & !(step - 1);
        for _ in 0..5 {
            self.shift_low();
        }
        // Trailing zero bytes are redundant: decoder reads past the end of a
        // segment resolve to zero.
        while self.out.len() > 1 && self.out.last() == Some(&0) {
            self.out.pop();
        }
        self.out
    }
}

pub struct RangeDecoder<'a> {
    code: u32,
    range: u32,
    last_r: u32,
    input: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(input: &'a [u8]) -> Result<Self> {
        if input.is_empty() {
            return Err(Error::Decode {
                pos: 0,
                msg: "empty range-coded stream".into(),
            });
        }
        let mut d = RangeDecoder {
            code: 0,
            range: u32::MAX,
            last_r: 0,
            input,
            pos: 1, // The first emitted byte is the encoder's initial cache.
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> u8 {
        // Reads past the logical end resolve to zero; container-level lengths
        // and symbol counts bound every decode.
        let b = self.input.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    fn decode_freq(&mut self) -> u32 {
        self.last_r = self.range >> PROB_BITS;
        (self.code / self.last_r).min(PROB_SCALE - 1)
    }

    fn decode_update(&mut self, cum: u32, freq: u32) {
        self.code -= cum * self.last_r;
        self.range = self.last_r * freq;
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte() as u32;
            self.range <<= 8;
        }
    }

    /// Decodes one symbol under `cdf`.
    pub fn decode_symbol(&mut self, cdf: &[u32]) -> usize {
        let f = self.decode_freq();
        // Last index with cdf[i] <= f.
        let sym = match cdf.binary_search(&f) {
            Ok(mut i) => {
                while i + 1 < cdf.len() - 1 && cdf[i + 1] == cdf[i] {
                    i += 1;
                }
                i
            }
            Err(i) => i - 1,
        };
        let sym = sym.min(cdf.len() - 2);
        self.decode_update(cdf[sym], cdf[sym + 1] - cdf[sym]);
        sym
    }

    pub fn decode_bits(&mut self, n: u32) -> u64 {
        let mut v = 0u64;
        for _ in 0..n {
            let f = self.decode_freq();
            let bit = (f >> (PROB_BITS - 1)) & 1;
            self.decode_update(bit << (PROB_BITS - 1), PROB_SCALE / 2);
            v = (v << 1) | bit as u64;
        }
        v
    }

    pub fn decode_eg(&mut self) -> u64 {
        let mut n = 1;
        while self.decode_bits(1) == 0 {
            n += 1;
        }
        if n == 1 {
            return 0;
        }
        let rest = self.decode_bits(n - 1);
        ((1u64 << (n - 1)) | rest) - 1
    }
}

/// Zigzag maps a signed integer to an unsigned one (0, -1, 1, -2, ...).
pub fn zigzag(v: i64) -> u64 {
    ((v << 1) ^ (v >> 63)) as u64
}

pub fn unzigzag(u: u64) -> i64 {
    ((u >> 1) as i64) ^ -((u & 1) as i64)
}
