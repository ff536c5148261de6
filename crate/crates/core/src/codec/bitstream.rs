//! Compressed-image container. Little-endian layout:
//!
//! ```text
//! "GABC"  u8 version=1  u32 config_hash
//! u32 width  u32 height  u32 padded_width  u32 padded_height
//! u8 lambda_index (255 = none)
//! u32 len + hyper-latent payload
//! u8 slices, then per slice u32 len + payload
//! u32 checksum
//! ```
//!
//! The checksum is the CRC-32 of every preceding byte followed by the
//! decoded symbols (i32 little-endian, hyper latent first, then slices in
//! order), so a decoder holding different weights detects it.

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"GABC";
pub const VERSION: u8 = 1;
pub const NO_LAMBDA: u8 = u8::MAX;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Bitstream {
    pub config_hash: u32,
    pub width: u32,
    pub height: u32,
    pub padded_width: u32,
    pub padded_height: u32,
    pub lambda_index: u8,
    pub z_payload: Vec<u8>,
    pub y_payloads: Vec<Vec<u8>>,
    pub checksum: u32,
}

impl Bitstream {
    /// Bytes covered by the checksum, before the symbols.
    pub fn body(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.payload_len() + 40);
        out.extend_from_slice(MAGIC);
        out.push(VERSION);
        out.extend_from_slice(&self.config_hash.to_le_bytes());
        for v in [self.width, self.height, self.padded_width, self.padded_height] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out.push(self.lambda_index);
        out.extend_from_slice(&(self.z_payload.len() as u32).to_le_bytes());
        out.extend_from_slice(&self.z_payload);
        out.push(self.y_payloads.len() as u8);
        for p in &self.y_payloads {
            out.extend_from_slice(&(p.len() as u32).to_le_bytes());
            out.extend_from_slice(p);
        }
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = self.body();
        out.extend_from_slice(&self.checksum.to_le_bytes());
        out
    }

    /// Sum of the range-coded payload sizes.
    pub fn payload_len(&self) -> usize {
        self.z_payload.len() + self.y_payloads.iter().map(Vec::len).sum::<usize>()
    }

    pub fn byte_len(&self) -> usize {
        self.body().len() + 4
    }

    /// Structural parse; the checksum is verified once the symbols are known.
    pub fn parse(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { buf: bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(r.format(0, "bad magic"));
        }
        let version = r.u8()?;
        if version != VERSION {
            return Err(r.format(4, format!("unsupported version {version}")));
        }
        let config_hash = r.u32()?;
        let [width, height, padded_width, padded_height] = [r.u32()?, r.u32()?, r.u32()?, r.u32()?];
        if width == 0 || height == 0 || padded_width < width || padded_height < height {
            return Err(r.format(9, format!("bad extents {width}x{height} in {padded_width}x{padded_height}")));
        }
        let lambda_index = r.u8()?;
        let z_len = r.u32()? as usize;
        let z_payload = r.take(z_len)?.to_vec();
        let slices = r.u8()? as usize;
        let mut y_payloads = Vec::with_capacity(slices);
        for _ in 0..slices {
            let len = r.u32()? as usize;
            y_payloads.push(r.take(len)?.to_vec());
        }
        let checksum = r.u32()?;
        if r.pos != bytes.len() {
            return Err(r.format(r.pos, format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Bitstream {
            config_hash,
            width,
            height,
            padded_width,
            padded_height,
            lambda_index,
            z_payload,
            y_payloads,
            checksum,
        })
    }

    /// Checksum over the body and the given symbols.
    pub fn compute_checksum(&self, z_symbols: &[i32], y_symbols: &[Vec<i32>]) -> u32 {
        let mut h = crc32fast::Hasher::new();
        h.update(&self.body());
        for s in z_symbols.iter().chain(y_symbols.iter().flatten()) {
            h.update(&s.to_le_bytes());
        }
        h.finalize()
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn format(&self, pos: usize, msg: impl Into<String>) -> Error {
        Error::Format {
            kind: "bitstream",
            pos,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Truncated(format!(
                "bitstream needs {n} bytes at offset {}, {} left",
                self.pos,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}
