// SPDX-License-Identifier: Apache-2.0

//! Byte-oriented range coder with a 64-bit state and 16-bit frequency totals.
//!
//! The encoder keeps a 65-bit `low` so a carry out of the top byte can be
//! propagated into bytes that were held back (the pending `0xFF` run).
//!
//! Two bytes of every stream are implicit: the leading byte, which is always
//! zero, and the tail. On finish the encoder rounds `low` up to a multiple of
//! 2^56 (always inside the final interval because `range >= 2^56`), writes
//! out the top byte and trims trailing zero bytes. The decoder reads zeros
//! past the end of its input.

use crate::{Error, Result};

pub const PRECISION: u32 = 16;
pub const TOTAL: u32 = 1 << PRECISION;
const TOP: u64 = 1 << 56;
const CODE_BYTES: usize = 8;

pub struct RangeEncoder {
    low: u128,
    range: u64,
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
            range: u64::MAX,
            cache: 0,
            cache_size: 1,
            out: Vec::new(),
        }
    }

    /// Codes the interval `[start, start + freq)` out of [`TOTAL`].
    pub fn encode(&mut self, start: u32, freq: u32) {
        debug_assert!(freq > 0 && start + freq <= TOTAL);
        let r = self.range >> PRECISION;
        self.low += (r as u128) * (start as u128);
        self.range = r * freq as u64;
        while self.range < TOP {
            self.range <<= 8;
            self.shift_low();
        }
    }

    fn shift_low(&mut self) {
        let low64 = self.low as u64;
        let carry = (self.low >> 64) as u8;
        if low64 < 0xFF00_0000_0000_0000 || carry != 0 {
            let mut temp = self.cache;
            loop {
                self.out.push(temp.wrapping_add(carry));
                temp = 0xFF;
                self.cache_size -= 1;
                if self.cache_size == 0 {
                    break;
                }
            }
            self.cache = (low64 >> 56) as u8;
        }
        self.cache_size += 1;
        self.low = (low64 << 8) as u128;
    }

    pub fn finish(mut self) -> Vec<u8> {
        let mask = (TOP as u128) - 1;
        self.low = (self.low + mask) & !mask;
        self.shift_low();
        self.shift_low();
        let mut out = self.out;
        out.remove(0);
        while out.last() == Some(&0) {
            out.pop();
        }
        out
    }
}

pub struct RangeDecoder<'a> {
    code: u64,
    range: u64,
    r: u64,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> RangeDecoder<'a> {
    pub fn new(bytes: &'a [u8]) -> Result<Self> {
        let mut d = RangeDecoder {
            code: 0,
            range: u64::MAX,
            r: 0,
            bytes,
            pos: 0,
        };
        for _ in 0..CODE_BYTES {
            d.code = (d.code << 8) | d.next_byte() as u64;
        }
        Ok(d)
    }

    fn next_byte(&mut self) -> u8 {
        let b = self.bytes.get(self.pos).copied().unwrap_or(0);
        self.pos += 1;
        b
    }

    /// Cumulative frequency the next symbol's interval contains.
    pub fn target(&mut self) -> Result<u32> {
        self.r = self.range >> PRECISION;
        let v = self.code / self.r;
        if v >= TOTAL as u64 {
            return Err(Error::Corrupt("range coder target out of range".into()));
        }
        Ok(v as u32)
    }

    /// Consumes the interval chosen after [`RangeDecoder::target`].
    pub fn consume(&mut self, start: u32, freq: u32) -> Result<()> {
        self.code -= self.r * start as u64;
        self.range = self.r * freq as u64;
        if self.code >= self.range {
            return Err(Error::Corrupt("range coder state out of interval".into()));
        }
        while self.range < TOP {
            self.code = (self.code << 8) | self.next_byte() as u64;
            self.range <<= 8;
        }
        Ok(())
    }

    /// True once every input byte has been consumed; bytes the decoder
    /// never reached mean the stream carries trailing garbage.
    pub fn is_exhausted(&self) -> bool {
        self.pos >= self.bytes.len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn raw_intervals_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let syms: Vec<(u32, u32)> = (0..20_000)
            .map(|_| {
                let start = rng.random_range(0..TOTAL - 1);
                let cap = if rng.random_bool(0.5) { 3 } else { TOTAL };
                let freq = rng.random_range(1..=(TOTAL - start).min(cap));
                (start, freq)
            })
            .collect();
        let mut enc = RangeEncoder::new();
        for &(s, f) in &syms {
            enc.encode(s, f);
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes).unwrap();
        for &(s, f) in &syms {
            let t = dec.target().unwrap();
            assert!(t >= s && t < s + f);
            dec.consume(s, f).unwrap();
        }
        assert!(dec.is_exhausted());
    }

    #[test]
    fn carry_heavy_stream() {
        // long runs of the top interval push low towards 0xFF.. and force carries
        let mut syms = vec![(TOTAL - 1, 1); 500];
        syms.extend(std::iter::repeat_n((0, 1), 200));
        syms.extend(std::iter::repeat_n((TOTAL - 2, 2), 300));
        let mut enc = RangeEncoder::new();
        for &(s, f) in &syms {
            enc.encode(s, f);
        }
        let bytes = enc.finish();
        let mut dec = RangeDecoder::new(&bytes).unwrap();
        for &(s, f) in &syms {
            let t = dec.target().unwrap();
            assert!(t >= s && t < s + f);
            dec.consume(s, f).unwrap();
        }
    }

    #[test]
    fn empty_stream_has_no_body() {
        assert!(RangeEncoder::new().finish().is_empty());
    }

    #[test]
    fn flush_costs_at_most_two_bytes() {
        // 1000 symbols of exactly 8 bits each
        let mut enc = RangeEncoder::new();
        for i in 0..1000u32 {
            enc.encode((i * 37 % 256) << 8, 256);
        }
        let n = enc.finish().len();
        assert!((1000..=1002).contains(&n), "{n}");
    }
}
