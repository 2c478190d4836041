// SPDX-License-Identifier: Apache-2.0

//! Point cloud data model, voxel blocks and block partitioning.

mod ply;

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use crate::spatial::GridIndex;
use crate::{round_half_away, Error, Result};

pub use ply::{load_ply, save_ply};

/// A voxelized point cloud. Points are unique and kept in lexicographic order.
#[derive(Debug, Clone, PartialEq)]
pub struct PointCloud {
    points: Vec<[u32; 3]>,
    colors: Option<Vec<[u8; 3]>>,
    precision: u8,
}

impl PointCloud {
    pub fn empty(with_color: bool) -> Self {
        PointCloud {
            points: Vec::new(),
            colors: with_color.then(Vec::new),
            precision: 1,
        }
    }

    /// Builds a cloud from integer voxel coordinates, merging duplicates.
    /// The colour of a merged voxel is the channel-wise mean of its sources.
    pub fn from_voxels(points: Vec<[u32; 3]>, colors: Option<Vec<[u8; 3]>>) -> Result<Self> {
        if let Some(c) = &colors {
            if c.len() != points.len() {
                return Err(Error::InvalidCloud(format!(
                    "{} colours for {} points",
                    c.len(),
                    points.len()
                )));
            }
        }
        let (points, colors) = match colors {
            None => {
                let mut p = points;
                p.sort_unstable();
                p.dedup();
                (p, None)
            }
            Some(c) => {
                let mut acc: BTreeMap<[u32; 3], ([u32; 3], u32)> = BTreeMap::new();
                for (p, c) in points.into_iter().zip(c) {
                    let e = acc.entry(p).or_insert(([0; 3], 0));
                    for ch in 0..3 {
                        e.0[ch] += c[ch] as u32;
                    }
                    e.1 += 1;
                }
                let mut pts = Vec::with_capacity(acc.len());
                let mut cols = Vec::with_capacity(acc.len());
                for (p, (sum, n)) in acc {
                    pts.push(p);
                    cols.push(sum.map(|s| mean_u8(s, n)));
                }
                (pts, Some(cols))
            }
        };
        let precision = precision_for(&points);
        Ok(PointCloud {
            points,
            colors,
            precision,
        })
    }

    /// Voxelizes real-valued coordinates by rounding half away from zero.
    pub fn voxelize(points: &[[f64; 3]], colors: Option<Vec<[u8; 3]>>) -> Result<Self> {
        let mut vox = Vec::with_capacity(points.len());
        for p in points {
            let mut v = [0u32; 3];
            for a in 0..3 {
                if !p[a].is_finite() {
                    return Err(Error::InvalidCloud(format!("non-finite coordinate {:?}", p)));
                }
                let r = round_half_away(p[a]);
                if r < 0.0 {
                    return Err(Error::InvalidCloud(format!("negative coordinate {:?}", p)));
                }
                if r > u32::MAX as f64 {
                    return Err(Error::InvalidCloud(format!("coordinate out of range {:?}", p)));
                }
                v[a] = r as u32;
            }
            vox.push(v);
        }
        Self::from_voxels(vox, colors)
    }

    pub fn points(&self) -> &[[u32; 3]] {
        &self.points
    }

    pub fn colors(&self) -> Option<&[[u8; 3]]> {
        self.colors.as_deref()
    }

    pub fn has_colors(&self) -> bool {
        self.colors.is_some()
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Bit depth p such that every coordinate lies in [0, 2^p).
    pub fn precision(&self) -> u8 {
        self.precision
    }

    /// Raises the recorded precision, e.g. to restore the source bit depth
    /// after decoding. Lowering it below what the points need is an error.
    pub fn with_precision(mut self, precision: u8) -> Result<Self> {
        let needed = precision_for(&self.points);
        if precision < needed {
            return Err(Error::arg(format!(
                "precision {precision} below required {needed}"
            )));
        }
        self.precision = precision;
        Ok(self)
    }

    /// Points as signed coordinates, the form used by metrics.
    pub fn coords_i64(&self) -> Vec<[i64; 3]> {
        self.points
            .iter()
            .map(|p| [p[0] as i64, p[1] as i64, p[2] as i64])
            .collect()
    }

    /// Removes colour attributes.
    pub fn geometry_only(&self) -> PointCloud {
        PointCloud {
            points: self.points.clone(),
            colors: None,
            precision: self.precision,
        }
    }

    /// Keeps the points whose predicate holds.
    pub fn filter(&self, mut keep: impl FnMut(&[u32; 3]) -> bool) -> PointCloud {
        let mut points = Vec::new();
        let mut colors = self.colors.as_ref().map(|_| Vec::new());
        for (i, p) in self.points.iter().enumerate() {
            if keep(p) {
                points.push(*p);
                if let (Some(out), Some(src)) = (colors.as_mut(), self.colors.as_ref()) {
                    out.push(src[i]);
                }
            }
        }
        PointCloud {
            points,
            colors,
            precision: self.precision,
        }
    }
}

fn mean_u8(sum: u32, n: u32) -> u8 {
    // round half away from zero on a non-negative quotient
    ((2 * sum + n) / (2 * n)) as u8
}

fn precision_for(points: &[[u32; 3]]) -> u8 {
    let max = points
        .iter()
        .flat_map(|p| p.iter().copied())
        .max()
        .unwrap_or(0);
    (32 - max.leading_zeros()).max(1) as u8
}

/// A dense cubic block of voxels with 1 (geometry) or 4 (geometry + RGB)
/// channels stored channel-major, each channel indexed by
/// `(x * size + y) * size + z`.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelBlock {
    pub origin: [u32; 3],
    pub size: usize,
    pub channels: usize,
    pub data: Vec<f32>,
    pub n_input: usize,
}

impl VoxelBlock {
    pub fn zeros(origin: [u32; 3], size: usize, channels: usize) -> Self {
        assert!(channels == 1 || channels == 4, "blocks carry 1 or 4 channels");
        VoxelBlock {
            origin,
            size,
            channels,
            data: vec![0.0; channels * size * size * size],
            n_input: 0,
        }
    }

    pub fn volume(&self) -> usize {
        self.size * self.size * self.size
    }

    #[inline]
    pub fn index(&self, x: usize, y: usize, z: usize) -> usize {
        (x * self.size + y) * self.size + z
    }

    #[inline]
    pub fn coords_of(&self, idx: usize) -> [usize; 3] {
        let s = self.size;
        [idx / (s * s), (idx / s) % s, idx % s]
    }

    pub fn geometry(&self) -> &[f32] {
        &self.data[..self.volume()]
    }

    pub fn geometry_mut(&mut self) -> &mut [f32] {
        let v = self.volume();
        &mut self.data[..v]
    }

    /// Colour channel `ch` in 0..3 (R, G, B).
    pub fn color_channel(&self, ch: usize) -> &[f32] {
        let v = self.volume();
        &self.data[(1 + ch) * v..(2 + ch) * v]
    }

    pub fn is_colored(&self) -> bool {
        self.channels == 4
    }

    /// Sets voxel `idx` occupied with an optional 8-bit colour.
    pub fn set_point(&mut self, idx: usize, color: Option<[u8; 3]>) {
        let v = self.volume();
        self.data[idx] = 1.0;
        if let (true, Some(c)) = (self.is_colored(), color) {
            for ch in 0..3 {
                self.data[(1 + ch) * v + idx] = c[ch] as f32 / 255.0;
            }
        }
    }

    /// Occupied voxel indices (geometry channel ≥ 0.5) in ascending order.
    pub fn occupied(&self) -> Vec<usize> {
        self.geometry()
            .iter()
            .enumerate()
            .filter(|(_, &v)| v >= 0.5)
            .map(|(i, _)| i)
            .collect()
    }

    /// 8-bit colour of voxel `idx`, from channels scaled to [0, 1].
    pub fn color_at(&self, idx: usize) -> Option<[u8; 3]> {
        if !self.is_colored() {
            return None;
        }
        let v = self.volume();
        Some(std::array::from_fn(|ch| {
            let c = self.data[(1 + ch) * v + idx].clamp(0.0, 1.0) as f64 * 255.0;
            round_half_away(c) as u8
        }))
    }

    /// Absolute coordinates of the occupied voxels together with colours.
    pub fn to_points(&self) -> (Vec<[u32; 3]>, Option<Vec<[u8; 3]>>) {
        let occ = self.occupied();
        let pts = occ
            .iter()
            .map(|&i| {
                let c = self.coords_of(i);
                [
                    self.origin[0] + c[0] as u32,
                    self.origin[1] + c[1] as u32,
                    self.origin[2] + c[2] as u32,
                ]
            })
            .collect();
        let cols = self
            .is_colored()
            .then(|| occ.iter().map(|&i| self.color_at(i).unwrap()).collect());
        (pts, cols)
    }

    /// Renders the points of `pc` that fall inside this block's cube.
    pub fn from_cloud_region(pc: &PointCloud, origin: [u32; 3], size: usize, channels: usize) -> Self {
        let mut b = VoxelBlock::zeros(origin, size, channels);
        let colors = pc.colors();
        for (i, p) in pc.points().iter().enumerate() {
            let inside = (0..3).all(|a| p[a] >= origin[a] && ((p[a] - origin[a]) as usize) < size);
            if inside {
                let idx = b.index(
                    (p[0] - origin[0]) as usize,
                    (p[1] - origin[1]) as usize,
                    (p[2] - origin[2]) as usize,
                );
                b.set_point(idx, colors.map(|c| c[i]));
                b.n_input += 1;
            }
        }
        b
    }
}

/// Splits a cloud into disjoint cubic blocks. Only non-empty blocks are
/// returned, ordered lexicographically by origin.
pub fn partition(pc: &PointCloud, block_size: usize) -> Result<Vec<VoxelBlock>> {
    if block_size < 8 {
        return Err(Error::arg(format!("block size {block_size} < 8")));
    }
    let bs = block_size as u32;
    let channels = if pc.has_colors() { 4 } else { 1 };
    let mut groups: BTreeMap<[u32; 3], Vec<usize>> = BTreeMap::new();
    for (i, p) in pc.points().iter().enumerate() {
        groups.entry(p.map(|c| c / bs)).or_default().push(i);
    }
    let colors = pc.colors();
    Ok(groups
        .into_iter()
        .map(|(cell, members)| {
            let origin = cell.map(|c| c * bs);
            let mut b = VoxelBlock::zeros(origin, block_size, channels);
            for i in members {
                let p = pc.points()[i];
                let idx = b.index(
                    (p[0] - origin[0]) as usize,
                    (p[1] - origin[1]) as usize,
                    (p[2] - origin[2]) as usize,
                );
                b.set_point(idx, colors.map(|c| c[i]));
            }
            b.n_input = b.occupied().len();
            b
        })
        .collect())
}

/// Reassembles a cloud from binary blocks.
pub fn merge(blocks: &[VoxelBlock]) -> Result<PointCloud> {
    let mut seen = HashSet::new();
    let colored = blocks.first().map(|b| b.is_colored()).unwrap_or(false);
    let mut pts = Vec::new();
    let mut cols = colored.then(Vec::new);
    for b in blocks {
        if !seen.insert((b.origin, b.size)) {
            return Err(Error::arg(format!("overlapping block origin {:?}", b.origin)));
        }
        if b.is_colored() != colored {
            return Err(Error::arg("mixed geometry-only and coloured blocks"));
        }
        let (p, c) = b.to_points();
        pts.extend(p);
        if let (Some(out), Some(c)) = (cols.as_mut(), c) {
            out.extend(c);
        }
    }
    check_disjoint(blocks)?;
    PointCloud::from_voxels(pts, cols)
}

fn check_disjoint(blocks: &[VoxelBlock]) -> Result<()> {
    // equal-size blocks on a grid only overlap when origins coincide, which
    // the caller already rejected; mixed sizes need the pairwise test
    if blocks.windows(2).all(|w| w[0].size == w[1].size) {
        return Ok(());
    }
    for (i, a) in blocks.iter().enumerate() {
        for b in &blocks[i + 1..] {
            let overlap = (0..3).all(|k| {
                let (a0, a1) = (a.origin[k] as u64, a.origin[k] as u64 + a.size as u64);
                let (b0, b1) = (b.origin[k] as u64, b.origin[k] as u64 + b.size as u64);
                a0 < b1 && b0 < a1
            });
            if overlap {
                return Err(Error::arg(format!(
                    "blocks at {:?} and {:?} overlap",
                    a.origin, b.origin
                )));
            }
        }
    }
    Ok(())
}

/// Occupancy flags of the eight octants of a block; bit
/// `(x_high << 2) | (y_high << 1) | z_high` is set when that octant holds a
/// filled voxel.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct OctantMask(pub u8);

impl OctantMask {
    pub const FULL: OctantMask = OctantMask(0xFF);

    /// Octant index of a voxel in a block of `size`.
    #[inline]
    pub fn octant_of(size: usize, c: [usize; 3]) -> u8 {
        let h = size / 2;
        (((c[0] >= h) as u8) << 2) | (((c[1] >= h) as u8) << 1) | ((c[2] >= h) as u8)
    }

    #[inline]
    pub fn contains(self, octant: u8) -> bool {
        self.0 & (1 << octant) != 0
    }

    /// Whether voxel `c` of a block of `size` may be selected.
    #[inline]
    pub fn admits(self, size: usize, c: [usize; 3]) -> bool {
        self.contains(Self::octant_of(size, c))
    }
}

pub fn octant_occupancy(block: &VoxelBlock) -> OctantMask {
    let mut bits = 0u8;
    for idx in block.occupied() {
        bits |= 1 << OctantMask::octant_of(block.size, block.coords_of(idx));
    }
    OctantMask(bits)
}

/// Mean distance from each point to its `k` nearest neighbours, averaged
/// over the cloud.
pub fn sparsity(pc: &PointCloud, k: usize) -> Result<f64> {
    if pc.len() <= k || k == 0 {
        return Err(Error::InvalidCloud(format!(
            "sparsity needs more than {k} points, got {}",
            pc.len()
        )));
    }
    let pts = pc.coords_i64();
    let index = GridIndex::new(&pts);
    let total: f64 = pts
        .iter()
        .enumerate()
        .map(|(i, q)| {
            let nn = index.knn(*q, k, Some(i));
            nn.iter().map(|&(d2, _)| (d2 as f64).sqrt()).sum::<f64>() / k as f64
        })
        .sum();
    Ok(total / pts.len() as f64)
}

impl PointCloud {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        load_ply(path)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        save_ply(self, path)
    }
}
