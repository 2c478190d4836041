// SPDX-License-Identifier: Apache-2.0

use nalgebra::{DMatrix, DVector};

use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RdPoint {
    /// Bits per input point.
    pub rate: f64,
    /// Quality in dB.
    pub quality: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BdMetrics {
    /// Average rate difference of the second curve at equal quality, in %.
    pub bd_rate: f64,
    /// Average quality difference of the second curve at equal rate.
    pub bd_quality: f64,
}

/// Least-squares polynomial coefficients, lowest degree first.
pub fn polyfit(x: &[f64], y: &[f64], degree: usize) -> Result<Vec<f64>> {
    if x.len() != y.len() || x.len() <= degree {
        return Err(Error::arg("polyfit needs more points than the degree"));
    }
    let a = DMatrix::from_fn(x.len(), degree + 1, |i, j| x[i].powi(j as i32));
    let b = DVector::from_column_slice(y);
    let coef = a
        .svd(true, true)
        .solve(&b, 1e-14)
        .map_err(|e| Error::arg(format!("polyfit: {e}")))?;
    Ok(coef.iter().copied().collect())
}

/// Definite integral of a polynomial over `[lo, hi]`.
fn integrate(coef: &[f64], lo: f64, hi: f64) -> f64 {
    let prim = |x: f64| {
        coef.iter()
            .enumerate()
            .map(|(i, c)| c * x.powi(i as i32 + 1) / (i + 1) as f64)
            .sum::<f64>()
    };
    prim(hi) - prim(lo)
}

fn validate(curve: &[RdPoint]) -> Result<()> {
    if curve.len() < 4 {
        return Err(Error::arg("a Bjontegaard curve needs at least 4 points"));
    }
    if curve.iter().any(|p| !(p.rate > 0.0) || !p.quality.is_finite()) {
        return Err(Error::arg("Bjontegaard points need positive rates and finite quality"));
    }
    Ok(())
}

fn bounds(v: &[f64]) -> (f64, f64) {
    v.iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &x| (lo.min(x), hi.max(x)))
}

/// Average gap between two fitted cubics `f(t)` over the overlap of their
/// abscissae.
fn average_gap(xa: &[f64], ya: &[f64], xb: &[f64], yb: &[f64]) -> Result<f64> {
    let (pa, pb) = (polyfit(xa, ya, 3)?, polyfit(xb, yb, 3)?);
    let ((la, ha), (lb, hb)) = (bounds(xa), bounds(xb));
    let (lo, hi) = (la.max(lb), ha.min(hb));
    if !(hi > lo) {
        return Err(Error::arg("Bjontegaard curves do not overlap"));
    }
    Ok((integrate(&pb, lo, hi) - integrate(&pa, lo, hi)) / (hi - lo))
}

/// Bjontegaard deltas of curve `b` against curve `a`: cubic fits of
/// quality against log10 rate (and the inverse), averaged over the
/// overlapping interval.
pub fn bd_metrics(a: &[RdPoint], b: &[RdPoint]) -> Result<BdMetrics> {
    validate(a)?;
    validate(b)?;
    let lr = |c: &[RdPoint]| c.iter().map(|p| p.rate.log10()).collect::<Vec<_>>();
    let q = |c: &[RdPoint]| c.iter().map(|p| p.quality).collect::<Vec<_>>();
    let (ra, rb, qa, qb) = (lr(a), lr(b), q(a), q(b));
    let bd_quality = average_gap(&ra, &qa, &rb, &qb)?;
    let log_gap = average_gap(&qa, &ra, &qb, &rb)?;
    Ok(BdMetrics {
        bd_rate: (10f64.powf(log_gap) - 1.0) * 100.0,
        bd_quality,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn curve() -> Vec<RdPoint> {
        [(0.05, 58.1), (0.15, 63.0), (0.5, 68.4), (1.5, 72.9), (3.0, 75.0)]
            .iter()
            .map(|&(rate, quality)| RdPoint { rate, quality })
            .collect()
    }

    #[test]
    fn identical_curves() {
        let m = bd_metrics(&curve(), &curve()).unwrap();
        assert!(m.bd_rate.abs() < 1e-9 && m.bd_quality.abs() < 1e-9);
    }

    #[test]
    fn quality_shift() {
        let b: Vec<RdPoint> = curve().iter().map(|p| RdPoint { quality: p.quality + 2.0, ..*p }).collect();
        let m = bd_metrics(&curve(), &b).unwrap();
        assert!((m.bd_quality - 2.0).abs() < 1e-6);
        assert!(m.bd_rate < 0.0);
    }

    #[test]
    fn doubled_rate() {
        let b: Vec<RdPoint> = curve().iter().map(|p| RdPoint { rate: p.rate * 2.0, ..*p }).collect();
        let m = bd_metrics(&curve(), &b).unwrap();
        assert!((m.bd_rate - 100.0).abs() < 0.1, "{}", m.bd_rate);
    }

    #[test]
    fn quality_delta_is_antisymmetric() {
        let b: Vec<RdPoint> = curve()
            .iter()
            .enumerate()
            .map(|(i, p)| RdPoint { rate: p.rate * 1.3, quality: p.quality + 0.4 * i as f64 })
            .collect();
        let ab = bd_metrics(&curve(), &b).unwrap();
        let ba = bd_metrics(&b, &curve()).unwrap();
        assert!((ab.bd_quality + ba.bd_quality).abs() < 1e-9);
    }

    #[test]
    fn errors() {
        assert!(bd_metrics(&curve()[..3], &curve()).is_err());
        let far: Vec<RdPoint> = curve().iter().map(|p| RdPoint { rate: p.rate * 1e4, ..*p }).collect();
        assert!(bd_metrics(&curve(), &far).is_err());
    }

    #[test]
    fn polyfit_recovers_cubic() {
        let x: Vec<f64> = (0..8).map(|i| i as f64 * 0.3 - 1.0).collect();
        let y: Vec<f64> = x.iter().map(|t| 1.0 - 2.0 * t + 0.5 * t * t + 0.25 * t * t * t).collect();
        let c = polyfit(&x, &y, 3).unwrap();
        for (a, b) in c.iter().zip([1.0, -2.0, 0.5, 0.25]) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
