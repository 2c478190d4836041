// SPDX-License-Identifier: Apache-2.0

//! Block distortion measures used as training losses.

use crate::pointcloud::VoxelBlock;
use crate::{Error, Result};

/// Probabilities are clamped to `[EPS, 1 - EPS]` before taking logarithms.
pub const EPS: f64 = 1e-7;

#[inline]
fn clamp(v: f64) -> (f64, bool) {
    if v < EPS {
        (EPS, true)
    } else if v > 1.0 - EPS {
        (1.0 - EPS, true)
    } else {
        (v, false)
    }
}

/// Focal loss of one voxel with occupancy `occupied` predicted as `v`.
#[inline]
pub fn focal_term(v: f64, occupied: bool, alpha: f64, gamma: f64) -> f64 {
    let (v, _) = clamp(v);
    if occupied {
        -alpha * (1.0 - v).powf(gamma) * v.ln()
    } else {
        -(1.0 - alpha) * v.powf(gamma) * (1.0 - v).ln()
    }
}

/// Derivative of [`focal_term`] with respect to `v` (zero where clamped).
#[inline]
pub fn focal_grad(v: f64, occupied: bool, alpha: f64, gamma: f64) -> f64 {
    let (v, clamped) = clamp(v);
    if clamped {
        return 0.0;
    }
    if occupied {
        let w = 1.0 - v;
        alpha * (gamma * w.powf(gamma - 1.0) * v.ln() - w.powf(gamma) / v)
    } else {
        let w = 1.0 - v;
        -(1.0 - alpha) * (gamma * v.powf(gamma - 1.0) * w.ln() - v.powf(gamma) / w)
    }
}

/// Mean focal loss over all voxels; `u` is binary, `v` holds probabilities.
pub fn focal_loss(u: &[f32], v: &[f32], alpha: f64, gamma: f64) -> Result<f64> {
    if u.len() != v.len() || u.is_empty() {
        return Err(Error::Shape(format!("focal loss over {} vs {} voxels", u.len(), v.len())));
    }
    let s: f64 = u
        .iter()
        .zip(v)
        .map(|(&a, &b)| focal_term(b as f64, a >= 0.5, alpha, gamma))
        .sum();
    Ok(s / u.len() as f64)
}

/// Colour error over the occupied voxels of `input`: per voxel the mean of
/// the three squared channel differences, averaged over the voxels.
pub fn color_mse(input: &VoxelBlock, decoded: &VoxelBlock) -> Result<f64> {
    if !input.is_colored() || !decoded.is_colored() {
        return Err(Error::arg("colour error needs 4-channel blocks"));
    }
    if input.size != decoded.size {
        return Err(Error::Shape(format!("blocks of size {} and {}", input.size, decoded.size)));
    }
    let occ = input.occupied();
    if occ.is_empty() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for &i in &occ {
        let mut s = 0.0;
        for ch in 0..3 {
            let d = (input.color_channel(ch)[i] - decoded.color_channel(ch)[i]) as f64;
            s += d * d;
        }
        total += s / 3.0;
    }
    Ok(total / occ.len() as f64)
}

/// Weighted geometry/colour distortion `(1 - ω)·d_geo + ω·d_col`.
#[inline]
pub fn total_distortion(d_geo: f64, d_col: f64, omega: f64) -> f64 {
    (1.0 - omega) * d_geo + omega * d_col
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::LN_2;

    #[test]
    fn focal_point_values() {
        let one = focal_loss(&[1.0], &[0.5], 0.7, 2.0).unwrap();
        assert!((one - 0.7 * 0.25 * LN_2).abs() < 1e-12);
        assert!((one - 0.121300).abs() < 1e-6);
        let zero = focal_loss(&[0.0], &[0.5], 0.7, 2.0).unwrap();
        assert!((zero - 0.051986).abs() < 1e-6);
        assert!(focal_loss(&[1.0], &[1.0], 0.7, 2.0).unwrap() < 1e-12);
        assert!(focal_loss(&[1.0], &[0.5, 0.2], 0.7, 2.0).is_err());
    }

    #[test]
    fn focal_nonnegative_and_prefers_correct() {
        for i in 1..100 {
            let v = i as f64 / 100.0;
            for occ in [true, false] {
                assert!(focal_term(v, occ, 0.7, 2.0) >= 0.0);
            }
            // a confident correct prediction costs less than the mirrored wrong one
            if v > 0.5 {
                assert!(focal_term(v, true, 0.7, 2.0) <= focal_term(1.0 - v, true, 0.7, 2.0));
                assert!(focal_term(1.0 - v, false, 0.7, 2.0) <= focal_term(v, false, 0.7, 2.0));
            }
        }
    }

    #[test]
    fn focal_grad_matches_difference() {
        let h = 1e-7;
        for &v in &[0.01, 0.2, 0.5, 0.77, 0.99] {
            for occ in [true, false] {
                let n = (focal_term(v + h, occ, 0.7, 2.0) - focal_term(v - h, occ, 0.7, 2.0)) / (2.0 * h);
                assert!((focal_grad(v, occ, 0.7, 2.0) - n).abs() < 1e-6 * n.abs().max(1.0));
            }
        }
    }

    #[test]
    fn color_error() {
        let mut a = VoxelBlock::zeros([0; 3], 8, 4);
        a.set_point(5, Some([255, 0, 0]));
        let mut b = a.clone();
        assert_eq!(color_mse(&a, &b).unwrap(), 0.0);
        for ch in 1..4 {
            b.data[ch * 512 + 5] = 0.0;
        }
        assert!((color_mse(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        let g = VoxelBlock::zeros([0; 3], 8, 1);
        assert!(color_mse(&g, &g).is_err());
    }

    #[test]
    fn distortion_mix() {
        assert_eq!(total_distortion(0.2, 0.4, 0.0), 0.2);
        assert!((total_distortion(0.2, 0.4, 0.5) - 0.3).abs() < 1e-15);
        assert_eq!(total_distortion(0.2, 0.4, 1.0), 0.4);
    }
}
