// SPDX-License-Identifier: Apache-2.0

use super::range_coder::TOTAL;
use crate::nn::likelihood;

/// Largest magnitude an entropy-coded integer may take inside a model's
/// support; anything else goes through the escape path.
pub const SUPPORT_CLAMP: i32 = 1 << 15;
/// Maximum number of in-support symbols of one model.
pub const MAX_SUPPORT: usize = 4096;
/// Half-width of the Gaussian support window, in standard deviations.
pub const GAUSSIAN_SPAN: f64 = 8.0;
/// Half-width of the logistic support window, in scale units.
pub const LOGISTIC_SPAN: f64 = 24.0;
/// Cost of the raw payload of an escaped value.
pub const ESCAPE_RAW_BITS: f64 = 32.0;

/// Quantized cumulative distribution over the integers `lo..lo + n`, plus a
/// trailing escape symbol for values outside that range. Every symbol has a
/// frequency of at least 1 and the frequencies sum to 2^16.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SymbolModel {
    lo: i32,
    cdf: Vec<u32>,
}

impl SymbolModel {
    /// Quantizes in-support probabilities `probs` (for `lo, lo+1, ...`); the
    /// mass missing from 1 becomes the escape probability.
    pub fn from_probs(lo: i32, probs: &[f64]) -> Self {
        assert!(!probs.is_empty() && probs.len() <= MAX_SUPPORT, "support size");
        let mut p: Vec<f64> = probs.iter().map(|&v| v.max(0.0)).collect();
        let inside: f64 = p.iter().sum();
        if inside > 1.0 {
            p.iter_mut().for_each(|v| *v /= inside);
            p.push(0.0);
        } else {
            p.push(1.0 - inside);
        }
        let n = p.len() as u32;
        let spare = (TOTAL - n) as f64;
        let mut freq: Vec<u32> = p.iter().map(|&v| 1 + (v * spare).floor() as u32).collect();
        let mode = p
            .iter()
            .enumerate()
            .fold(0, |best, (i, &v)| if v > p[best] { i } else { best });
        let sum: u32 = freq.iter().sum();
        if sum <= TOTAL {
            freq[mode] += TOTAL - sum;
        } else {
            freq[mode] -= sum - TOTAL;
        }
        let mut cdf = Vec::with_capacity(freq.len() + 1);
        let mut acc = 0;
        cdf.push(0);
        for f in freq {
            acc += f;
            cdf.push(acc);
        }
        debug_assert_eq!(acc, TOTAL);
        SymbolModel { lo, cdf }
    }

    /// Lowest in-support value.
    pub fn lo(&self) -> i32 {
        self.lo
    }

    /// Highest in-support value.
    pub fn hi(&self) -> i32 {
        self.lo + self.support_len() as i32 - 1
    }

    pub fn support_len(&self) -> usize {
        self.cdf.len() - 2
    }

    pub fn escape_symbol(&self) -> usize {
        self.cdf.len() - 2
    }

    /// `(start, freq)` of symbol index `s`.
    #[inline]
    pub fn interval(&self, s: usize) -> (u32, u32) {
        (self.cdf[s], self.cdf[s + 1] - self.cdf[s])
    }

    /// Symbol index whose interval contains cumulative frequency `t`.
    #[inline]
    pub fn lookup(&self, t: u32) -> usize {
        self.cdf.partition_point(|&c| c <= t) - 1
    }

    pub fn frequencies(&self) -> Vec<u32> {
        self.cdf.windows(2).map(|w| w[1] - w[0]).collect()
    }

    /// Exact number of bits the coder spends on `v` under this model,
    /// ignoring coder overhead.
    pub fn cost_bits(&self, v: i32) -> f64 {
        let s = self.symbol_of(v);
        let (_, f) = self.interval(s.unwrap_or(self.escape_symbol()));
        let base = -(f as f64 / TOTAL as f64).log2();
        if s.is_some() {
            base
        } else {
            base + ESCAPE_RAW_BITS
        }
    }

    #[inline]
    pub fn symbol_of(&self, v: i32) -> Option<usize> {
        if v >= self.lo && v <= self.hi() {
            Some((v - self.lo) as usize)
        } else {
            None
        }
    }
}

fn window(center: f64, half: f64) -> (i32, i32) {
    let c = SUPPORT_CLAMP as f64;
    let center = center.clamp(-c, c);
    let mut lo = (center - half).floor().max(-c) as i64;
    let mut hi = (center + half).ceil().min(c) as i64;
    if (hi - lo + 1) as usize > MAX_SUPPORT {
        let mid = center.round() as i64;
        let h = (MAX_SUPPORT / 2) as i64;
        lo = mid - h + 1;
        hi = mid + h;
    }
    (lo as i32, hi as i32)
}

/// Conditional model of one latent: Gaussian with mean `mu` and scale
/// `sigma` (both 32-bit, so encoder and decoder build identical tables).
pub fn build_symbol_model(mu: f32, sigma: f32) -> SymbolModel {
    let (mu, sigma) = (mu as f64, sigma as f64);
    let (lo, hi) = window(mu, GAUSSIAN_SPAN * sigma);
    let probs: Vec<f64> = (lo..=hi)
        .map(|v| likelihood::gaussian(v as f64, mu, sigma))
        .collect();
    SymbolModel::from_probs(lo, &probs)
}

/// Per-channel models of the fixed hyper-latent prior: a discretized
/// logistic with location `loc` and scale `exp(log_scale)` per channel.
pub fn build_factorized(loc: &[f32], log_scale: &[f32]) -> Vec<SymbolModel> {
    loc.iter()
        .zip(log_scale)
        .map(|(&m, &ls)| {
            let (m, s) = (m as f64, (ls as f64).exp());
            let (lo, hi) = window(m, LOGISTIC_SPAN * s);
            let probs: Vec<f64> = (lo..=hi).map(|v| likelihood::logistic(v as f64, m, s)).collect();
            SymbolModel::from_probs(lo, &probs)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn tables_sum_to_total_and_are_positive() {
        for &(mu, sigma) in &[(0.0f32, 0.001f32), (3.3, 0.5), (-100.0, 40.0), (0.0, 5000.0), (1e9, 1.0)] {
            let m = build_symbol_model(mu, sigma);
            let f = m.frequencies();
            assert_eq!(f.iter().sum::<u32>(), TOTAL);
            assert!(f.iter().all(|&x| x >= 1));
            assert!(m.support_len() <= MAX_SUPPORT);
            assert!(m.lo() >= -SUPPORT_CLAMP && m.hi() <= SUPPORT_CLAMP);
        }
    }

    #[test]
    fn narrow_model_concentrates_at_mean() {
        let m = build_symbol_model(0.0, 1e-3);
        let s = m.symbol_of(0).unwrap();
        let (_, f) = m.interval(s);
        assert!(f >= TOTAL - 4);
        assert!(m.cost_bits(0) < 1e-3);
    }

    #[test]
    fn deterministic_tables() {
        assert_eq!(build_symbol_model(1.25, 2.5), build_symbol_model(1.25, 2.5));
        assert_eq!(build_factorized(&[0.5, -1.0], &[0.0, 1.0]), build_factorized(&[0.5, -1.0], &[0.0, 1.0]));
    }

    #[test]
    fn lookup_inverts_intervals() {
        let m = build_symbol_model(0.4, 3.0);
        for s in 0..=m.escape_symbol() {
            let (st, f) = m.interval(s);
            assert_eq!(m.lookup(st), s);
            assert_eq!(m.lookup(st + f - 1), s);
        }
    }

    #[test]
    fn escape_cost_includes_raw_payload() {
        let m = build_symbol_model(0.0, 1.0);
        assert!(m.symbol_of(100).is_none());
        assert!(m.cost_bits(100) > ESCAPE_RAW_BITS);
    }
}
