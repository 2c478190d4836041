// SPDX-License-Identifier: Apache-2.0

//! Entropy coding of integer tensors.
//!
//! A coded stream is `[u32 LE symbol count][range-coded body]`. Each value
//! is coded with its own [`SymbolModel`]; values outside a model's support
//! are sent as the escape symbol followed by their zig-zag code split into
//! two flat 16-bit chunks. The body's trailing zero bytes are implicit, so
//! truncation is caught by the container's explicit payload lengths rather
//! than here.

pub mod model;
pub mod range_coder;

pub use model::{build_factorized, build_symbol_model, SymbolModel};

use crate::nn::likelihood;
use crate::{Error, Result};
use range_coder::{RangeDecoder, RangeEncoder};

/// Discretized Gaussian probability of integer `q`.
pub fn gaussian_likelihood(q: f64, mu: f64, sigma: f64) -> f64 {
    likelihood::gaussian(q, mu, sigma)
}

/// Fixed, input-independent prior over hyper-latents: one discretized
/// logistic per channel.
#[derive(Debug, Clone, PartialEq)]
pub struct FactorizedPrior {
    pub loc: Vec<f32>,
    pub log_scale: Vec<f32>,
}

impl FactorizedPrior {
    pub fn channels(&self) -> usize {
        self.loc.len()
    }

    pub fn models(&self) -> Vec<SymbolModel> {
        build_factorized(&self.loc, &self.log_scale)
    }

    pub fn likelihood(&self, channel: usize, v: f64) -> f64 {
        likelihood::logistic(v, self.loc[channel] as f64, (self.log_scale[channel] as f64).exp())
    }
}

#[inline]
fn zigzag(v: i32) -> u32 {
    ((v << 1) ^ (v >> 31)) as u32
}

#[inline]
fn unzigzag(u: u32) -> i32 {
    ((u >> 1) as i32) ^ -((u & 1) as i32)
}

/// Codes `values[i]` with `models[i]`.
pub fn range_encode(values: &[i32], models: &[&SymbolModel]) -> Result<Vec<u8>> {
    if values.len() != models.len() {
        return Err(Error::Shape(format!(
            "{} values for {} models",
            values.len(),
            models.len()
        )));
    }
    let count = u32::try_from(values.len()).map_err(|_| Error::arg("too many symbols"))?;
    let mut enc = RangeEncoder::new();
    for (&v, m) in values.iter().zip(models) {
        match m.symbol_of(v) {
            Some(s) => {
                let (st, f) = m.interval(s);
                enc.encode(st, f);
            }
            None => {
                let (st, f) = m.interval(m.escape_symbol());
                enc.encode(st, f);
                let z = zigzag(v);
                enc.encode(z >> 16, 1);
                enc.encode(z & 0xFFFF, 1);
            }
        }
    }
    let mut out = count.to_le_bytes().to_vec();
    out.extend(enc.finish());
    Ok(out)
}

/// Inverse of [`range_encode`]; the stream's symbol count must equal the
/// number of models and the body must be consumed exactly.
pub fn range_decode(bytes: &[u8], models: &[&SymbolModel]) -> Result<Vec<i32>> {
    let head: [u8; 4] = bytes
        .get(..4)
        .and_then(|b| b.try_into().ok())
        .ok_or_else(|| Error::Corrupt("missing symbol count".into()))?;
    let count = u32::from_le_bytes(head) as usize;
    if count != models.len() {
        return Err(Error::Corrupt(format!(
            "stream holds {count} symbols, expected {}",
            models.len()
        )));
    }
    let mut dec = RangeDecoder::new(&bytes[4..])?;
    let mut out = Vec::with_capacity(count);
    for m in models {
        let t = dec.target()?;
        let s = m.lookup(t);
        let (st, f) = m.interval(s);
        dec.consume(st, f)?;
        if s == m.escape_symbol() {
            let hi = dec.target()?;
            dec.consume(hi, 1)?;
            let lo = dec.target()?;
            dec.consume(lo, 1)?;
            out.push(unzigzag((hi << 16) | lo));
        } else {
            out.push(m.lo() + s as i32);
        }
    }
    if !dec.is_exhausted() {
        return Err(Error::Corrupt("trailing bytes after coded symbols".into()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zigzag_round_trip() {
        for v in [0, 1, -1, 2, -2, i32::MAX, i32::MIN, 12345, -98765] {
            assert_eq!(unzigzag(zigzag(v)), v);
        }
    }

    #[test]
    fn empty_stream() {
        let bytes = range_encode(&[], &[]).unwrap();
        assert_eq!(bytes, vec![0, 0, 0, 0]);
        assert!(range_decode(&bytes, &[]).unwrap().is_empty());
    }

    #[test]
    fn uniform_bytes_cost_about_eight_bits() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let uniform = SymbolModel::from_probs(0, &[1.0 / 256.0; 256]);
        let vals: Vec<i32> = (0..10_000).map(|_| rng.random_range(0..256)).collect();
        let models = vec![&uniform; vals.len()];
        let bytes = range_encode(&vals, &models).unwrap();
        assert!((bytes.len() as f64 - 10_000.0).abs() <= 100.0, "{}", bytes.len());
        assert_eq!(range_decode(&bytes, &models).unwrap(), vals);
    }

    #[test]
    fn escapes_round_trip() {
        let m = build_symbol_model(0.0, 1.0);
        let vals = vec![0, 1, -1, 500, -70000, i32::MAX, i32::MIN, 3];
        let models = vec![&m; vals.len()];
        let bytes = range_encode(&vals, &models).unwrap();
        assert_eq!(range_decode(&bytes, &models).unwrap(), vals);
    }

    #[test]
    fn framing_errors() {
        let m = build_symbol_model(0.0, 2.0);
        let vals = vec![1, 2, 3, -4, 0, 0, 7];
        let models = vec![&m; vals.len()];
        let bytes = range_encode(&vals, &models).unwrap();
        assert!(range_decode(&bytes, &models[..3]).is_err());
        let mut extra = bytes.clone();
        extra.extend([0x5a; 16]);
        assert!(range_decode(&extra, &models).is_err());
        assert!(range_decode(&bytes[..2], &models).is_err());
    }

    proptest! {
        #[test]
        fn gaussian_streams_round_trip(
            params in proptest::collection::vec((-50.0f32..50.0, 0.001f32..30.0, -3.0f64..3.0), 0..300)
        ) {
            let models: Vec<SymbolModel> = params.iter().map(|&(m, s, _)| build_symbol_model(m, s)).collect();
            let vals: Vec<i32> = params.iter().map(|&(m, s, z)| (m as f64 + z * s as f64 * 3.0).round() as i32).collect();
            let refs: Vec<&SymbolModel> = models.iter().collect();
            let bytes = range_encode(&vals, &refs).unwrap();
            prop_assert_eq!(range_decode(&bytes, &refs).unwrap(), vals);
        }
    }
}
