//! Compressed bitstream container.
//!
//! Layout (multi-byte integers big-endian):
//!
//! ```text
//! magic   b"FATC"
//! version u8 (= 1)
//! hash    32 bytes, SHA-256 of the model config JSON
//! lambda  u8 index into the config's lambda ladder
//! height  u32, width u32 (original image extents)
//! z seg   u32 length, then: u16 channel count, per channel i32 min / i32 max
//!         integer range, then the range-coded hyper latent bytes
//! y segs  u8 count, each: u32 length + range-coded slice bytes
//! ```
//!
//! Latent slices are stored as separate self-delimiting segments in coding
//! order. The recommended file extension is `.fatc`.

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"FATC";
const VERSION: u8 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Bitstream {
    pub config_hash: [u8; 32],
    pub lambda_index: u8,
    pub height: u32,
    pub width: u32,
    /// Per hyper channel (min, max) integer range for table building.
    pub z_ranges: Vec<(i32, i32)>,
    pub z_bytes: Vec<u8>,
    pub y_segments: Vec<Vec<u8>>,
}

impl Bitstream {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.config_hash);
        out.push(self.lambda_index);
        out.extend_from_slice(&self.height.to_be_bytes());
        out.extend_from_slice(&self.width.to_be_bytes());
        let z_len = 2 + self.z_ranges.len() * 8 + self.z_bytes.len();
        out.extend_from_slice(&(z_len as u32).to_be_bytes());
        out.extend_from_slice(&(self.z_ranges.len() as u16).to_be_bytes());
        for &(lo, hi) in &self.z_ranges {
            out.extend_from_slice(&lo.to_be_bytes());
            out.extend_from_slice(&hi.to_be_bytes());
        }
        out.extend_from_slice(&self.z_bytes);
        out.push(self.y_segments.len() as u8);
        for seg in &self.y_segments {
            out.extend_from_slice(&(seg.len() as u32).to_be_bytes());
            out.extend_from_slice(seg);
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut c = Cursor { buf, pos: 0 };
        let magic = c.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format("not a compressed bitstream".into()));
        }
        let version = c.u8()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported bitstream version {version}")));
        }
        let mut config_hash = [0u8; 32];
        config_hash.copy_from_slice(c.take(32)?);
        let lambda_index = c.u8()?;
        let height = c.u32()?;
        let width = c.u32()?;
        if height == 0 || width == 0 {
            return Err(Error::Format("zero image extent".into()));
        }
        let z_len = c.u32()? as usize;
        let z_start = c.pos;
        let nch = c.u16()? as usize;
        if z_len < 2 + nch * 8 {
            return Err(c.err("hyper segment shorter than its channel table"));
        }
        let mut z_ranges = Vec::with_capacity(nch);
        for _ in 0..nch {
            let lo = c.i32()?;
            let hi = c.i32()?;
            if lo > hi {
                return Err(c.err("inverted hyper channel range"));
            }
            z_ranges.push((lo, hi));
        }
        let z_bytes = c.take(z_len - (c.pos - z_start))?.to_vec();
        let nseg = c.u8()? as usize;
        let mut y_segments = Vec::with_capacity(nseg);
        for _ in 0..nseg {
            let len = c.u32()? as usize;
            y_segments.push(c.take(len)?.to_vec());
        }
        Ok(Bitstream {
            config_hash,
            lambda_index,
            height,
            width,
            z_ranges,
            z_bytes,
            y_segments,
        })
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn err(&self, msg: &str) -> Error {
        Error::Decode {
            pos: self.pos,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Decode {
                pos: self.pos,
                msg: format!("truncated stream: need {n} bytes, have {}", self.buf.len() - self.pos),
            });
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn i32(&mut self) -> Result<i32> {
        Ok(i32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Bitstream {
        Bitstream {
            config_hash: [7u8; 32],
            lambda_index: 3,
            height: 480,
            width: 640,
            z_ranges: vec![(-5, 9), (0, 0), (-128, 127)],
            z_bytes: vec![1, 2, 3, 4, 5],
            y_segments: vec![vec![9, 8, 7], vec![], vec![0xFF; 100]],
        }
    }

    #[test]
    fn round_trip() {
        let b = sample();
        let bytes = b.to_bytes();
        assert_eq!(Bitstream::from_bytes(&bytes).unwrap(), b);
    }

    #[test]
    fn bad_magic_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            Bitstream::from_bytes(&bytes),
            Err(Error::Format(_))
        ));
    }

    #[test]
    fn every_truncation_point_fails_cleanly() {
        let bytes = sample().to_bytes();
        for cut in 0..bytes.len() {
            assert!(
                Bitstream::from_bytes(&bytes[..cut]).is_err(),
                "truncation at {cut} did not error"
            );
        }
    }

    #[test]
    fn inverted_range_rejected() {
        let mut b = sample();
        b.z_ranges[1] = (4, -4);
        let bytes = b.to_bytes();
        assert!(Bitstream::from_bytes(&bytes).is_err());
    }
}
