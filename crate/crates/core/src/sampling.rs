// SPDX-License-Identifier: Apache-2.0

//! Uniform grid down-sampling and the matching coordinate re-scaling.

use crate::pointcloud::PointCloud;
use crate::{round_half_away, Error, Result};

/// Sampling factor. With learned up-sampling enabled it must be a power of two.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplingConfig {
    pub sf: f64,
}

impl SamplingConfig {
    pub fn new(sf: f64, abu: bool) -> Result<Self> {
        if !(sf.is_finite() && sf > 0.0) {
            return Err(Error::arg(format!("sampling factor {sf} must be positive")));
        }
        if abu && !is_power_of_two(sf) {
            return Err(Error::arg(format!(
                "sampling factor {sf} must be an integer power of 2 with learned up-sampling"
            )));
        }
        Ok(SamplingConfig { sf })
    }
}

pub fn is_power_of_two(sf: f64) -> bool {
    sf >= 1.0 && sf.fract() == 0.0 && (sf as u64).is_power_of_two()
}

/// Divides coordinates by `sf` and rounds, merging voxels that collide.
pub fn downsample(pc: &PointCloud, sf: f64) -> Result<PointCloud> {
    if !(sf >= 1.0) || !sf.is_finite() {
        return Err(Error::arg(format!("down-sampling factor {sf} < 1")));
    }
    if sf == 1.0 {
        return Ok(pc.clone());
    }
    let pts = pc
        .points()
        .iter()
        .map(|p| p.map(|c| round_half_away(c as f64 / sf) as u32))
        .collect();
    PointCloud::from_voxels(pts, pc.colors().map(|c| c.to_vec()))
}

/// Scales coordinates back by `sf`. The number of points is unchanged.
pub fn upsample_basic(pc: &PointCloud, sf: f64) -> Result<PointCloud> {
    if !(sf >= 1.0) || !sf.is_finite() {
        return Err(Error::arg(format!("up-sampling factor {sf} < 1")));
    }
    if sf == 1.0 {
        return Ok(pc.clone());
    }
    let pts: Vec<[u32; 3]> = pc
        .points()
        .iter()
        .map(|p| p.map(|c| round_half_away(c as f64 * sf) as u32))
        .collect();
    let out = PointCloud::from_voxels(pts, pc.colors().map(|c| c.to_vec()))?;
    debug_assert_eq!(out.len(), pc.len());
    Ok(out)
}
