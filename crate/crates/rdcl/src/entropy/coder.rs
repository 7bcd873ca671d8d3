//! Byte-oriented carry-less range coder.
//!
//! 32-bit low/range registers; a byte is emitted once the top byte of the
//! interval is settled, and near-underflow the range is truncated to the
//! next 2^16 boundary instead of propagating carries. Encoder and decoder
//! run the identical renormalization, which is what makes the truncation
//! decodable.

use super::{CdfTable, EntropyError};

const TOP: u32 = 1 << 24;
const BOT: u32 = 1 << 16;

pub struct RangeEncoder {
    low: u32,
    range: u32,
    out: Vec<u8>,
}

impl RangeEncoder {
    pub fn new() -> Self {
        RangeEncoder { low: 0, range: u32::MAX, out: Vec::new() }
    }

    pub fn encode_symbol(&mut self, symbol: i32, table: &CdfTable) -> Result<(), EntropyError> {
        let (cum, freq) = table.lookup(symbol)?;
        self.encode(cum, freq, table.precision);
        Ok(())
    }

    pub fn encode(&mut self, cum: u32, freq: u32, precision: u8) {
        debug_assert!(freq >= 1);
        debug_assert!(cum + freq <= 1u32 << precision);
        let r = self.range >> precision;
        self.low = self.low.wrapping_add(r * cum);
        self.range = r * freq;
        self.normalize();
    }

    fn normalize(&mut self) {
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) < TOP {
                // top byte settled
            } else if self.range < BOT {
                // interval straddles a top-byte boundary with a small range:
                // truncate up to the next 2^16 boundary (always nonzero here)
                self.range = self.low.wrapping_neg() & (BOT - 1);
                debug_assert!(self.range != 0);
            } else {
                break;
            }
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
            self.range <<= 8;
        }
    }

    /// Flush the final 32 bits of state and return the byte stream.
    pub fn finish(mut self) -> Vec<u8> {
        for _ in 0..4 {
            self.out.push((self.low >> 24) as u8);
            self.low <<= 8;
        }
        self.out
    }
}

impl Default for RangeEncoder {
    fn default() -> Self {
        Self::new()
    }
}

pub struct RangeDecoder<'a> {
    low: u32,
    range: u32,
    code: u32,
    bytes: &'a [u8],
    pos: usize,
    overrun: bool,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Self {
        let mut d = RangeDecoder { low: 0, range: u32::MAX, code: 0, bytes, pos: 0, overrun: false };
        for _ in 0..4 {
            d.code = (d.code << 8) | d.next_byte() as u32;
        }
        d
    }

    fn next_byte(&mut self) -> u8 {
        if self.pos < self.bytes.len() {
            let b = self.bytes[self.pos];
            self.pos += 1;
            b
        } else {
            self.overrun = true;
            0
        }
    }

    pub fn decode_symbol(&mut self, table: &CdfTable) -> Result<i32, EntropyError> {
        let precision = table.precision;
        let r = self.range >> precision;
        let scaled = (self.code.wrapping_sub(self.low) / r).min((1u32 << precision) - 1);
        let (symbol, cum, freq) = table.find(scaled);
        self.low = self.low.wrapping_add(r * cum);
        self.range = r * freq;
        self.normalize();
        if self.overrun {
            return Err(EntropyError::Truncated { pos: self.bytes.len() });
        }
        Ok(symbol)
    }

    fn normalize(&mut self) {
        loop {
            if (self.low ^ self.low.wrapping_add(self.range)) < TOP {
            } else if self.range < BOT {
                self.range = self.low.wrapping_neg() & (BOT - 1);
            } else {
                break;
            }
            self.code = (self.code << 8) | self.next_byte() as u32;
            self.low <<= 8;
            self.range <<= 8;
        }
    }
}

impl RangeEncoder {
    /// Encode with escape handling: symbols outside the table's literal
    /// range are coded as the nearer escape marker followed by the symbol
    /// under the shared bypass table. Errors only beyond the bypass range.
    pub fn encode_symbol_escaped(
        &mut self,
        symbol: i32,
        table: &CdfTable,
    ) -> Result<(), EntropyError> {
        let (lo, hi) = table.literal_range();
        if !table.has_escapes || (symbol >= lo && symbol <= hi) {
            return self.encode_symbol(symbol, table);
        }
        let marker = if symbol < lo { lo - 1 } else { hi + 1 };
        self.encode_symbol(marker, table)?;
        self.encode_symbol(symbol, crate::entropy::cdf::bypass_table())
            .map_err(|_| EntropyError::SymbolOutOfRange {
                symbol,
                lo: -crate::entropy::cdf::BYPASS_MAX,
                hi: crate::entropy::cdf::BYPASS_MAX,
            })
    }
}

impl RangeDecoder<'_> {
    /// Mirror of [`RangeEncoder::encode_symbol_escaped`].
    pub fn decode_symbol_escaped(&mut self, table: &CdfTable) -> Result<i32, EntropyError> {
        let s = self.decode_symbol(table)?;
        let (lo, hi) = table.literal_range();
        if table.has_escapes && (s < lo || s > hi) {
            self.decode_symbol(crate::entropy::cdf::bypass_table())
        } else {
            Ok(s)
        }
    }
}

/// Encode a slice of symbols, each under its own table (escape-aware).
pub fn encode_symbols<'t>(
    symbols: &[i32],
    tables: impl Iterator<Item = &'t CdfTable>,
) -> Result<Vec<u8>, EntropyError> {
    if symbols.is_empty() {
        return Ok(Vec::new());
    }
    let mut enc = RangeEncoder::new();
    let mut n = 0usize;
    for (s, t) in symbols.iter().zip(tables) {
        enc.encode_symbol_escaped(*s, t)?;
        n += 1;
    }
    assert_eq!(n, symbols.len(), "table iterator shorter than symbol slice");
    Ok(enc.finish())
}

/// Decode `n` symbols; the table iterator must replay the encoder's order.
pub fn decode_symbols<'t>(
    bytes: &[u8],
    n: usize,
    tables: impl Iterator<Item = &'t CdfTable>,
) -> Result<Vec<i32>, EntropyError> {
    if n == 0 {
        return Ok(Vec::new());
    }
    let mut dec = RangeDecoder::new(bytes);
    let mut out = Vec::with_capacity(n);
    for t in tables.take(n) {
        out.push(dec.decode_symbol_escaped(t)?);
    }
    if out.len() != n {
        return Err(EntropyError::Truncated { pos: bytes.len() });
    }
    Ok(out)
}
