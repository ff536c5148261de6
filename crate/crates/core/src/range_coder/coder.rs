//! Carry-propagating range coder: 64-bit `low`, 32-bit `range`, one output
//! byte per renormalization, bytes in big-endian order of `low`.

use super::table::{CdfTable, BYPASS_BITS};
use crate::error::{Error, Result};

const TOP: u32 = 1 << 24;
const BYPASS_CHUNK: u32 = 16;

#[derive(Debug)]
pub struct Encoder {
    low: u64,
    range: u32,
    cache: u8,
    pending: u64,
    out: Vec<u8>,
}

impl Default for Encoder {
    fn default() -> Self {
        Self::new()
    }
}

impl Encoder {
    pub fn new() -> Self {
        Encoder {
            low: 0,
            range: u32::MAX,
            cache: 0,
            pending: 1,
            out: Vec::new(),
        }
    }

    fn shift_low(&mut self) {
        if self.low < 0xFF00_0000 || self.low >= 1 << 32 {
            let carry = (self.low >> 32) as u8;
            let mut byte = self.cache;
            loop {
                self.out.push(byte.wrapping_add(carry));
                byte = 0xFF;
                self.pending -= 1;
                if self.pending == 0 {
                    break;
                }
            }
            self.cache = (self.low >> 24) as u8;
        }
        self.pending += 1;
        self.low = (self.low & 0x00FF_FFFF) << 8;
    }

    fn encode_range(&mut self, start: u32, freq: u32, precision: u32) {
        let r = self.range >> precision;
        self.low += r as u64 * start as u64;
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    pub fn encode(&mut self, symbol: i32, table: &CdfTable) {
        let bin = table.bin(symbol);
        let cdf = table.cdf();
        self.encode_range(cdf[bin], cdf[bin + 1] - cdf[bin], table.precision());
        if bin == table.escape_index() {
            let raw = symbol as u32;
            for shift in (0..BYPASS_BITS).step_by(BYPASS_CHUNK as usize).rev() {
                let chunk = (raw >> shift) & ((1 << BYPASS_CHUNK) - 1);
                self.encode_range(chunk, 1, BYPASS_CHUNK);
            }
        }
    }

    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..5 {
            self.shift_low();
        }
        // The first byte is the initial empty cache, always zero.
        self.out.remove(0);
        self.out
    }
}

#[derive(Debug)]
pub struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
    code: u32,
    range: u32,
}

impl<'a> Decoder<'a> {
    pub fn new(buf: &'a [u8]) -> Result<Self> {
        let mut d = Decoder {
            buf,
            pos: 0,
            code: 0,
            range: u32::MAX,
        };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte()? as u32;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> Result<u8> {
        let b = *self.buf.get(self.pos).ok_or_else(|| {
            Error::Truncated(format!("range decoder needs byte {} of {}", self.pos + 1, self.buf.len()))
        })?;
        self.pos += 1;
        Ok(b)
    }

    fn target(&self, precision: u32) -> Result<(u32, u32)> {
        let r = self.range >> precision;
        let v = self.code / r;
        if v >> precision != 0 {
            return Err(Error::Corrupt("range decoder state out of bounds".into()));
        }
        Ok((r, v))
    }

    fn consume(&mut self, r: u32, start: u32, freq: u32) -> Result<()> {
        self.code -= r * start;
        self.range = r * freq;
        while self.range < TOP {
            self.range <<= 8;
            self.code = (self.code << 8) | self.next_byte()? as u32;
        }
        Ok(())
    }

    pub fn decode(&mut self, table: &CdfTable) -> Result<i32> {
        let (r, v) = self.target(table.precision())?;
        let bin = table.lookup(v);
        let cdf = table.cdf();
        self.consume(r, cdf[bin], cdf[bin + 1] - cdf[bin])?;
        if bin != table.escape_index() {
            return Ok(table.offset() + bin as i32);
        }
        let mut raw = 0u32;
        for _ in 0..BYPASS_BITS / BYPASS_CHUNK {
            let (r, v) = self.target(BYPASS_CHUNK)?;
            self.consume(r, v, 1)?;
            raw = (raw << BYPASS_CHUNK) | v;
        }
        let symbol = raw as i32;
        if table.bin(symbol) != table.escape_index() {
            return Err(Error::Corrupt(format!("escaped symbol {symbol} lies inside the table support")));
        }
        Ok(symbol)
    }

    /// Bytes consumed so far.
    pub fn position(&self) -> usize {
        self.pos
    }

    /// Require that every byte was consumed.
    pub fn finish(self) -> Result<()> {
        if self.pos != self.buf.len() {
            return Err(Error::Corrupt(format!(
                "{} unread bytes after the last symbol",
                self.buf.len() - self.pos
            )));
        }
        Ok(())
    }
}

/// Encode `symbols[i]` under `tables[i]`.
pub fn encode(symbols: &[i32], tables: &[&CdfTable]) -> Result<Vec<u8>> {
    if symbols.len() != tables.len() {
        return Err(Error::invalid(format!("{} symbols, {} tables", symbols.len(), tables.len())));
    }
    let mut enc = Encoder::new();
    for (&s, t) in symbols.iter().zip(tables) {
        enc.encode(s, t);
    }
    Ok(enc.finish())
}

/// Decode `count` symbols; the stream must be consumed exactly.
pub fn decode(bytes: &[u8], tables: &[&CdfTable], count: usize) -> Result<Vec<i32>> {
    if tables.len() != count {
        return Err(Error::invalid(format!("{count} symbols, {} tables", tables.len())));
    }
    let mut dec = Decoder::new(bytes)?;
    let out = tables.iter().map(|t| dec.decode(t)).collect::<Result<Vec<_>>>()?;
    dec.finish()?;
    Ok(out)
}

/// Ideal cost in bits of `symbols` under the frozen tables.
pub fn ideal_bits(symbols: &[i32], tables: &[&CdfTable]) -> f64 {
    symbols.iter().zip(tables).map(|(&s, t)| t.bits(s)).sum()
}
