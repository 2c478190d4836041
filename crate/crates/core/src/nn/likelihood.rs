// SPDX-License-Identifier: Apache-2.0

//! Discretized Gaussian and logistic likelihoods of integer-binned values,
//! evaluated in f64 with tail-stable formulas.

use std::f64::consts::{LN_2, SQRT_2};

/// Probability floor; every likelihood is clamped to at least 2^-64.
pub const P_MIN: f64 = 5.421010862427522e-20;

const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
fn upper_tail(t: f64) -> f64 {
    0.5 * libm::erfc(t / SQRT_2)
}

#[inline]
fn pdf(t: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * t * t).exp()
}

/// `P = Φ((v-μ+½)/σ) - Φ((v-μ-½)/σ)`, floored at [`P_MIN`].
pub fn gaussian(v: f64, mu: f64, sigma: f64) -> f64 {
    let c = v - mu;
    let a = (c + 0.5) / sigma;
    let b = (c - 0.5) / sigma;
    // difference of the tails on the side away from the mean
    let p = if c > 0.0 {
        upper_tail(b) - upper_tail(a)
    } else {
        upper_tail(-a) - upper_tail(-b)
    };
    p.max(P_MIN)
}

/// Gaussian CDF Φ(t).
pub fn normal_cdf(t: f64) -> f64 {
    upper_tail(-t)
}

#[inline]
pub fn bits(p: f64) -> f64 {
    -p.log2()
}

/// d bits / dv and d bits / dσ of `-log2 gaussian(v, μ, σ)`; d/dμ is the
/// negation of d/dv.
pub fn gaussian_bits_grad(v: f64, mu: f64, sigma: f64) -> (f64, f64) {
    let p = gaussian(v, mu, sigma);
    if p <= P_MIN {
        return (0.0, 0.0);
    }
    let a = (v - mu + 0.5) / sigma;
    let b = (v - mu - 0.5) / sigma;
    let (fa, fb) = (pdf(a), pdf(b));
    let dp_dv = (fa - fb) / sigma;
    let dp_ds = -(a * fa - b * fb) / sigma;
    let k = -1.0 / (p * LN_2);
    (k * dp_dv, k * dp_ds)
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Logistic CDF difference over the unit bin around `v`, floored.
pub fn logistic(v: f64, loc: f64, scale: f64) -> f64 {
    let c = v - loc;
    let a = (c + 0.5) / scale;
    let b = (c - 0.5) / scale;
    let p = if c > 0.0 {
        sigmoid(-b) - sigmoid(-a)
    } else {
        sigmoid(a) - sigmoid(b)
    };
    p.max(P_MIN)
}

/// d bits / dv and d bits / d(log scale) of `-log2 logistic(v, loc, e^ls)`.
pub fn logistic_bits_grad(v: f64, loc: f64, log_scale: f64) -> (f64, f64) {
    let s = log_scale.exp();
    let p = logistic(v, loc, s);
    if p <= P_MIN {
        return (0.0, 0.0);
    }
    let a = (v - loc + 0.5) / s;
    let b = (v - loc - 0.5) / s;
    let d = |x: f64| {
        let q = sigmoid(x);
        q * (1.0 - q)
    };
    let (da, db) = (d(a), d(b));
    let dp_dv = (da - db) / s;
    let dp_dls = -(a * da - b * db);
    let k = -1.0 / (p * LN_2);
    (k * dp_dv, k * dp_dls)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gaussian_point_value() {
        // Φ(1) - Φ(-1) = erf(1/√2)
        let p = gaussian(0.0, 0.0, 0.5);
        assert!((p - libm::erf(1.0 / SQRT_2)).abs() < 1e-15);
        assert!((p - 0.682689).abs() < 1e-6);
        // -log2(0.682689...) = 0.550699
        assert!((bits(p) - 0.550699).abs() < 1e-6);
    }

    #[test]
    fn symmetry_and_normalization() {
        for &(mu, sigma) in &[(0.0, 0.3), (0.0, 2.0), (1.3, 5.0), (-4.2, 0.01)] {
            let mut total = 0.0;
            for k in -200..=200 {
                total += gaussian(k as f64, mu, sigma);
                if mu == 0.0 {
                    assert_eq!(gaussian(k as f64, 0.0, sigma), gaussian(-k as f64, 0.0, sigma));
                }
            }
            assert!((total - 1.0).abs() < 1e-6, "{total}");
        }
        let total: f64 = (-400..=400).map(|k| logistic(k as f64, 0.7, 3.0)).sum();
        assert!((total - 1.0).abs() < 1e-6);
    }

    #[test]
    fn floor_in_far_tail() {
        assert_eq!(gaussian(1000.0, 0.0, 1.0), P_MIN);
        assert_eq!(gaussian_bits_grad(1000.0, 0.0, 1.0), (0.0, 0.0));
    }

    #[test]
    fn gradients_match_finite_differences() {
        let h = 1e-6;
        for &(v, m, s) in &[(0.3, 0.0, 0.7), (2.0, -1.0, 1.5), (-3.2, 0.4, 2.2), (0.0, 0.1, 0.2)] {
            let f = |v: f64, s: f64| bits(gaussian(v, m, s));
            let (gv, gs) = gaussian_bits_grad(v, m, s);
            let nv = (f(v + h, s) - f(v - h, s)) / (2.0 * h);
            let ns = (f(v, s + h) - f(v, s - h)) / (2.0 * h);
            assert!((gv - nv).abs() < 1e-6 * nv.abs().max(1.0));
            assert!((gs - ns).abs() < 1e-6 * ns.abs().max(1.0));
            let fl = |v: f64, ls: f64| bits(logistic(v, m, ls.exp()));
            let ls = s.ln();
            let (lv, lls) = logistic_bits_grad(v, m, ls);
            let nv = (fl(v + h, ls) - fl(v - h, ls)) / (2.0 * h);
            let nls = (fl(v, ls + h) - fl(v, ls - h)) / (2.0 * h);
            assert!((lv - nv).abs() < 1e-6 * nv.abs().max(1.0));
            assert!((lls - nls).abs() < 1e-6 * nls.abs().max(1.0));
        }
    }
}
