// SPDX-License-Identifier: Apache-2.0

//! Sampling-factor selection and rate/distortion sweeps with target-rate
//! picking on the upper convex hull.

use super::{encode, CodecConfig, Models};
use crate::pointcloud::sparsity;
use crate::quality::{ReportRow, CSV_HEADER};
use crate::{PointCloud, Result};

/// Target rates (bpp) for geometry-only coding.
pub const GEOMETRY_TARGETS: [f64; 4] = [0.05, 0.15, 0.5, 1.5];
/// Target rates (bpp) for joint geometry and colour coding.
pub const JOINT_TARGETS: [f64; 4] = [0.1, 0.3, 1.0, 3.0];
/// Relative distance from a target a selected point may lie at.
pub const TARGET_TOLERANCE: f64 = 0.1;
/// Neighbours in the sparsity measure.
pub const SPARSITY_NEIGHBOURS: usize = 20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ScaleThresholds {
    /// Sparsity at or below which the cloud is coded at full resolution.
    pub full: f64,
    /// Sparsity at or below which a factor of 2 is used; above it, 4.
    pub half: f64,
}

impl Default for ScaleThresholds {
    fn default() -> Self {
        ScaleThresholds { full: 1.8, half: 4.0 }
    }
}

/// Sampling factor from the cloud's sparsity: sparser clouds get larger factors.
/// Clouds too small to measure are coded at full resolution.
pub fn auto_scale(pc: &PointCloud, t: &ScaleThresholds) -> Result<f64> {
    if pc.len() <= SPARSITY_NEIGHBOURS {
        return Ok(1.0);
    }
    let s = sparsity(pc, SPARSITY_NEIGHBOURS)?;
    Ok(if s <= t.full {
        1.0
    } else if s <= t.half {
        2.0
    } else {
        4.0
    })
}

/// Indices of the points on the upper-left convex hull of `(rate, quality)`:
/// no kept point is dominated (another has lower or equal rate and higher
/// quality) and every kept point lies on or above the chord of its
/// neighbours. Points with a non-finite coordinate are ignored. The result
/// is ordered by rate.
pub fn upper_hull(points: &[(f64, f64)]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..points.len())
        .filter(|&i| points[i].0.is_finite() && points[i].1.is_finite())
        .collect();
    order.sort_by(|&a, &b| {
        points[a]
            .0
            .total_cmp(&points[b].0)
            .then(points[b].1.total_cmp(&points[a].1))
            .then(a.cmp(&b))
    });
    let mut front: Vec<usize> = Vec::new();
    for i in order {
        if front.last().is_none_or(|&j| points[i].1 > points[j].1) {
            front.push(i);
        }
    }
    let mut hull: Vec<usize> = Vec::new();
    for i in front {
        while hull.len() >= 2 {
            let (a, b) = (points[hull[hull.len() - 2]], points[hull[hull.len() - 1]]);
            let c = points[i];
            // b is dropped when it is not strictly above the chord a–c
            let cross = (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0);
            if cross >= 0.0 {
                hull.pop();
            } else {
                break;
            }
        }
        hull.push(i);
    }
    hull
}

/// The hull point closest in rate to `target` within the tolerance; ties go
/// to the higher quality.
pub fn select_target(points: &[(f64, f64)], hull: &[usize], target: f64) -> Option<usize> {
    hull.iter()
        .copied()
        .filter(|&i| (points[i].0 - target).abs() <= TARGET_TOLERANCE * target)
        .min_by(|&a, &b| {
            let da = (points[a].0 - target).abs();
            let db = (points[b].0 - target).abs();
            da.total_cmp(&db).then(points[b].1.total_cmp(&points[a].1))
        })
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepPoint {
    pub label: String,
    pub row: ReportRow,
}

impl SweepPoint {
    /// Quality used for hull construction: PSNR-YUV for colour coding,
    /// PSNR-D1 otherwise.
    pub fn quality(&self) -> f64 {
        match &self.row.color {
            Some(c) => c.yuv,
            None => self.row.d1,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    pub hull: Vec<usize>,
    /// Per target rate, the selected point if one lies within tolerance.
    pub selections: Vec<(f64, Option<usize>)>,
}

impl SweepResult {
    pub fn from_points(points: Vec<SweepPoint>, targets: &[f64]) -> Self {
        let rq: Vec<(f64, f64)> = points.iter().map(|p| (p.row.rate_bpp, p.quality())).collect();
        let hull = upper_hull(&rq);
        let selections = targets.iter().map(|&t| (t, select_target(&rq, &hull, t))).collect();
        SweepResult {
            points,
            hull,
            selections,
        }
    }

    /// Every measured point, then one line per target.
    pub fn to_csv(&self) -> String {
        let mut out = format!("{CSV_HEADER},config,on_hull,selected_for\n");
        for (i, p) in self.points.iter().enumerate() {
            let targets: Vec<String> = self
                .selections
                .iter()
                .filter(|(_, s)| *s == Some(i))
                .map(|(t, _)| t.to_string())
                .collect();
            out.push_str(&format!(
                "{},{},{},{}\n",
                p.row.to_csv(),
                p.label,
                self.hull.contains(&i),
                targets.join(";")
            ));
        }
        out
    }

    /// Targets without a point within tolerance.
    pub fn missed_targets(&self) -> Vec<f64> {
        self.selections.iter().filter(|(_, s)| s.is_none()).map(|(t, _)| *t).collect()
    }
}

/// Encodes `pc` under every labelled configuration, measures the decoded
/// cloud and selects the target rates on the hull.
pub fn rd_sweep(
    pc_name: &str,
    pc: &PointCloud,
    grid: &[(String, CodecConfig, &Models)],
    targets: &[f64],
) -> Result<SweepResult> {
    let mut points = Vec::with_capacity(grid.len());
    for (label, cfg, models) in grid {
        let enc = encode(pc, cfg, models)?;
        let reference = if cfg.with_color { pc.clone() } else { pc.geometry_only() };
        let row = ReportRow::measure(pc_name, &reference, &enc.reconstruction, enc.bytes.len())?;
        points.push(SweepPoint { label: label.clone(), row });
    }
    Ok(SweepResult::from_points(points, targets))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    // a two-voxel-thick slab, spread out by `step`
    fn dilated_surface(step: u32) -> PointCloud {
        let mut pts = Vec::new();
        for x in 0..32 {
            for y in 0..32 {
                for z in 0..2 {
                    pts.push([x * step, y * step, z * step]);
                }
            }
        }
        PointCloud::from_voxels(pts, None).unwrap()
    }

    #[test]
    fn scale_follows_sparsity() {
        let t = ScaleThresholds::default();
        assert!(sparsity(&dilated_surface(1), SPARSITY_NEIGHBOURS).unwrap() <= 1.8);
        assert_eq!(auto_scale(&dilated_surface(1), &t).unwrap(), 1.0);
        let s2 = sparsity(&dilated_surface(2), SPARSITY_NEIGHBOURS).unwrap();
        let expected = if s2 <= 1.8 { 1.0 } else if s2 <= 4.0 { 2.0 } else { 4.0 };
        assert_eq!(auto_scale(&dilated_surface(2), &t).unwrap(), expected);
        assert_eq!(auto_scale(&dilated_surface(4), &t).unwrap(), 4.0);
        let tiny = PointCloud::from_voxels(vec![[0, 0, 0]], None).unwrap();
        assert_eq!(auto_scale(&tiny, &t).unwrap(), 1.0);
    }

    #[test]
    fn hull_drops_dominated_and_concave_points() {
        let pts = [(0.1, 30.0), (0.2, 29.0), (0.3, 40.0), (0.4, 41.0), (0.5, 45.0), (0.5, 44.0)];
        // (0.2,29) is dominated, (0.4,41) lies under the chord (0.3,40)–(0.5,45)
        assert_eq!(upper_hull(&pts), vec![0, 2, 4]);
        assert!(upper_hull(&[(f64::NAN, 1.0), (1.0, f64::INFINITY)]).is_empty());
    }

    #[test]
    fn target_selection() {
        let pts = [(0.046, 30.0), (0.054, 31.0), (0.15, 35.0), (0.6, 40.0)];
        let hull = upper_hull(&pts);
        assert_eq!(select_target(&pts, &hull, 0.15), Some(2));
        assert_eq!(select_target(&pts, &hull, 0.5), None);
        // equidistant: the higher quality wins
        assert_eq!(select_target(&pts, &hull, 0.05), Some(1));
        let one = [(1.45, 40.0)];
        assert_eq!(select_target(&one, &upper_hull(&one), 1.5), Some(0));
        assert_eq!(select_target(&one, &upper_hull(&one), 1.0), None);
    }

    fn dominated(pts: &[(f64, f64)], i: usize) -> bool {
        pts.iter()
            .enumerate()
            .any(|(j, q)| j != i && q.0 <= pts[i].0 && q.1 >= pts[i].1 && (q.0 < pts[i].0 || q.1 > pts[i].1))
    }

    proptest! {
        #[test]
        fn hull_keeps_no_dominated_point(raw in proptest::collection::vec((1u32..1000, 0u32..1000), 1..40)) {
            let pts: Vec<(f64, f64)> = raw.iter().map(|&(r, q)| (r as f64 / 100.0, q as f64 / 10.0)).collect();
            let hull = upper_hull(&pts);
            prop_assert!(!hull.is_empty());
            for &i in &hull {
                prop_assert!(!dominated(&pts, i));
            }
            // every point lies on or under the hull's piecewise-linear envelope
            for p in &pts {
                for w in hull.windows(2) {
                    let (a, b) = (pts[w[0]], pts[w[1]]);
                    if p.0 >= a.0 && p.0 <= b.0 {
                        let y = a.1 + (b.1 - a.1) * (p.0 - a.0) / (b.0 - a.0);
                        prop_assert!(p.1 <= y + 1e-9);
                    }
                }
            }
        }
    }
}
