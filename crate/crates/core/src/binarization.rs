// SPDX-License-Identifier: Apache-2.0

//! Turning probability blocks into occupancy: Top-k selection restricted
//! to originally occupied octants, and the encoder-side search for the
//! multiplier `β` in `k = N_input · β`.

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use crate::pointcloud::OctantMask;
use crate::quality::{self, plane_error, psnr_from_mse, rgb_to_yuv};
use crate::spatial::GridIndex;
use crate::{round_half_away, Error, Result, VoxelBlock};

/// Step of the fine β grid.
pub const BETA_STEP: f64 = 0.05;
/// Step of the coarse β grid of the fast search.
pub const COARSE_STEP: f64 = 0.5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TopkMetric {
    D1,
    D2,
    D1Yuv,
    D2Yuv,
    D1Rgb,
    D2Rgb,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ColorSpace {
    Yuv,
    Rgb,
}

impl TopkMetric {
    fn plane(self) -> bool {
        matches!(self, TopkMetric::D2 | TopkMetric::D2Yuv | TopkMetric::D2Rgb)
    }

    fn color(self) -> Option<ColorSpace> {
        match self {
            TopkMetric::D1Yuv | TopkMetric::D2Yuv => Some(ColorSpace::Yuv),
            TopkMetric::D1Rgb | TopkMetric::D2Rgb => Some(ColorSpace::Rgb),
            _ => None,
        }
    }
}

impl FromStr for TopkMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "d1" => TopkMetric::D1,
            "d2" => TopkMetric::D2,
            "d1yuv" => TopkMetric::D1Yuv,
            "d2yuv" => TopkMetric::D2Yuv,
            "d1rgb" => TopkMetric::D1Rgb,
            "d2rgb" => TopkMetric::D2Rgb,
            _ => return Err(Error::arg(format!("unknown top-k metric {s}"))),
        })
    }
}

impl fmt::Display for TopkMetric {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TopkMetric::D1 => "d1",
            TopkMetric::D2 => "d2",
            TopkMetric::D1Yuv => "d1yuv",
            TopkMetric::D2Yuv => "d2yuv",
            TopkMetric::D1Rgb => "d1rgb",
            TopkMetric::D2Rgb => "d2rgb",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SearchMode {
    Full,
    Fast,
}

/// How the up-sampled blocks are binarized.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AbuTopk {
    /// Reuse the codec's β.
    None,
    Full,
    Fast,
}

impl FromStr for AbuTopk {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(AbuTopk::None),
            "full" => Ok(AbuTopk::Full),
            "fast" => Ok(AbuTopk::Fast),
            _ => Err(Error::arg(format!("unknown ABU top-k mode {s}"))),
        }
    }
}

impl fmt::Display for AbuTopk {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AbuTopk::None => "none",
            AbuTopk::Full => "full",
            AbuTopk::Fast => "fast",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TopkConfig {
    pub metric: TopkMetric,
    pub color_weight: f64,
    pub max_topk: f64,
    pub patience: usize,
    pub mode: SearchMode,
}

impl Default for TopkConfig {
    fn default() -> Self {
        TopkConfig {
            metric: TopkMetric::D1Yuv,
            color_weight: 0.5,
            max_topk: 10.0,
            patience: 5,
            mode: SearchMode::Full,
        }
    }
}

/// `k = max(1, round(n_input · β))`, rounding half away from zero.
pub fn k_from_beta(n_input: usize, beta: f64) -> usize {
    (round_half_away(n_input as f64 * beta) as usize).max(1)
}

/// Admissible voxels ranked by descending probability, ties by ascending
/// linear index.
pub fn rank_voxels(prob: &VoxelBlock, mask: OctantMask) -> Vec<usize> {
    let p = prob.geometry();
    let mut idx: Vec<usize> = (0..prob.volume())
        .filter(|&i| mask.admits(prob.size, prob.coords_of(i)))
        .collect();
    idx.sort_by(|&a, &b| p[b].total_cmp(&p[a]).then(a.cmp(&b)));
    idx
}

fn build_binary(prob: &VoxelBlock, selected: &[usize]) -> VoxelBlock {
    let mut out = VoxelBlock::zeros(prob.origin, prob.size, prob.channels);
    let v = prob.volume();
    for &i in selected {
        out.data[i] = 1.0;
        for ch in 1..prob.channels {
            out.data[ch * v + i] = prob.data[ch * v + i].clamp(0.0, 1.0);
        }
    }
    out.n_input = selected.len();
    out
}

/// Marks the `min(k, admissible)` most probable admissible voxels occupied;
/// colour channels of selected voxels are carried over.
pub fn top_k(prob: &VoxelBlock, k: usize, mask: OctantMask) -> Result<VoxelBlock> {
    if k == 0 {
        return Err(Error::arg("top-k needs k >= 1"));
    }
    let mut sel = rank_voxels(prob, mask);
    sel.truncate(k);
    sel.sort_unstable();
    Ok(build_binary(prob, &sel))
}

/// Reference-side state for scoring candidate reconstructions of one block.
struct Scorer {
    src: Vec<[i64; 3]>,
    src_index: GridIndex,
    normals: Option<Vec<Option<[f64; 3]>>>,
    src_colors: Option<Vec<[u8; 3]>>,
    color: Option<ColorSpace>,
    color_weight: f64,
    peak_sq: f64,
}

fn block_coords(b: &VoxelBlock, idx: &[usize]) -> Vec<[i64; 3]> {
    idx.iter()
        .map(|&i| b.coords_of(i).map(|c| c as i64))
        .collect()
}

impl Scorer {
    fn new(source: &VoxelBlock, cfg: &TopkConfig) -> Result<Self> {
        let occ = source.occupied();
        if occ.is_empty() {
            return Err(Error::InvalidCloud("empty source block".into()));
        }
        let src = block_coords(source, &occ);
        let src_index = GridIndex::new(&src);
        let normals = cfg
            .metric
            .plane()
            .then(|| quality::reference_normals(&src, &src_index));
        let color = if source.is_colored() { cfg.metric.color() } else { None };
        let src_colors = color.map(|_| occ.iter().map(|&i| source.color_at(i).unwrap()).collect());
        let bits = (usize::BITS - (source.size - 1).leading_zeros()).max(1) as u8;
        Ok(Scorer {
            src,
            src_index,
            normals,
            src_colors,
            color,
            color_weight: cfg.color_weight,
            peak_sq: quality::geometry_peak_sq(bits),
        })
    }

    fn geometry_error(&self, d: [f64; 3], src_i: usize) -> f64 {
        match &self.normals {
            Some(n) => plane_error(d, n[src_i]),
            None => d[0] * d[0] + d[1] * d[1] + d[2] * d[2],
        }
    }

    /// Quality in dB of a candidate given as ascending voxel indices.
    fn score(&self, cand: &VoxelBlock, selected: &[usize]) -> f64 {
        let test = block_coords(cand, selected);
        let test_index = GridIndex::new(&test);
        let disp = |a: [i64; 3], b: [i64; 3]| [(a[0] - b[0]) as f64, (a[1] - b[1]) as f64, (a[2] - b[2]) as f64];
        let fwd_nn = quality::nearest_indices(&self.src, &test_index);
        let bwd_nn = quality::nearest_indices(&test, &self.src_index);
        let fwd = fwd_nn
            .iter()
            .enumerate()
            .map(|(i, &j)| self.geometry_error(disp(test[j], self.src[i]), i))
            .sum::<f64>()
            / self.src.len() as f64;
        let bwd = bwd_nn
            .iter()
            .enumerate()
            .map(|(i, &j)| self.geometry_error(disp(test[i], self.src[j]), j))
            .sum::<f64>()
            / test.len() as f64;
        let geo = psnr_from_mse(fwd.max(bwd), self.peak_sq);
        let (Some(space), Some(src_cols)) = (self.color, &self.src_colors) else {
            return geo;
        };
        let test_cols: Vec<[u8; 3]> = selected.iter().map(|&i| cand.color_at(i).unwrap()).collect();
        let channel_mse = |from: &[[u8; 3]], nn: &[usize], to: &[[u8; 3]]| {
            let mut acc = [0.0; 3];
            for (i, &j) in nn.iter().enumerate() {
                let (a, b) = match space {
                    ColorSpace::Yuv => (rgb_to_yuv(from[i]), rgb_to_yuv(to[j])),
                    ColorSpace::Rgb => (from[i].map(|v| v as f64), to[j].map(|v| v as f64)),
                };
                for ch in 0..3 {
                    acc[ch] += (a[ch] - b[ch]).powi(2);
                }
            }
            acc.map(|v| v / from.len() as f64)
        };
        let f = channel_mse(src_cols, &fwd_nn, &test_cols);
        let b = channel_mse(&test_cols, &bwd_nn, src_cols);
        let m: [f64; 3] = std::array::from_fn(|i| f[i].max(b[i]));
        let mse = match space {
            ColorSpace::Yuv => (6.0 * m[0] + m[1] + m[2]) / 8.0,
            ColorSpace::Rgb => (m[0] + m[1] + m[2]) / 3.0,
        };
        let col = psnr_from_mse(mse, 255.0 * 255.0);
        let w = self.color_weight;
        match (w == 0.0, w == 1.0) {
            (true, _) => geo,
            (_, true) => col,
            _ => (1.0 - w) * geo + w * col,
        }
    }
}

/// Outcome of a β search.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BetaChoice {
    pub beta: f64,
    pub k: usize,
    /// Quality in dB of the block binarized with `k` (`inf` when lossless).
    pub quality: f64,
    /// Number of distinct `k` values scored.
    pub evaluations: usize,
}

struct Search<'a> {
    prob: &'a VoxelBlock,
    ranked: Vec<usize>,
    scorer: Scorer,
    n_input: usize,
    cache: HashMap<usize, f64>,
    best: Option<BetaChoice>,
}

impl Search<'_> {
    fn eval(&mut self, beta: f64) -> bool {
        let k = k_from_beta(self.n_input, beta);
        let q = match self.cache.get(&k) {
            Some(&q) => q,
            None => {
                let mut sel: Vec<usize> = self.ranked[..k.min(self.ranked.len())].to_vec();
                sel.sort_unstable();
                let q = self.scorer.score(self.prob, &sel);
                self.cache.insert(k, q);
                q
            }
        };
        let improved = self.best.is_none_or(|b| q > b.quality);
        if improved {
            self.best = Some(BetaChoice {
                beta,
                k,
                quality: q,
                evaluations: 0,
            });
        }
        improved
    }

    /// Walks `betas` in order, stopping after `patience` consecutive
    /// evaluations that do not beat the best so far.
    fn scan(&mut self, betas: impl Iterator<Item = f64>, patience: usize) {
        let mut stale = 0;
        for b in betas {
            if self.eval(b) {
                stale = 0;
            } else {
                stale += 1;
                if stale >= patience {
                    break;
                }
            }
        }
    }
}

fn grid(step: f64, from: i64, to: i64) -> impl Iterator<Item = f64> {
    let ascending = from <= to;
    let (lo, hi) = if ascending { (from, to) } else { (to, from) };
    let mut v: Vec<f64> = (lo..=hi).map(move |j| round_beta(j as f64 * step)).collect();
    if !ascending {
        v.reverse();
    }
    v.into_iter()
}

/// Snaps grid values to 1e-9 so that 0.05·j lands on the same double
/// regardless of how it was produced.
fn round_beta(b: f64) -> f64 {
    (b * 1e9).round() / 1e9
}

/// Picks `β` on the encoder by scoring the binarized block against
/// `source`. Full mode walks `0.05, 0.10, …, max_topk`; fast mode walks a
/// 0.5 grid and then refines at 0.05 outwards from the coarse winner within
/// ±0.5. Equal qualities keep the earlier candidate.
pub fn optimize_beta(source: &VoxelBlock, prob: &VoxelBlock, mask: OctantMask, cfg: &TopkConfig) -> Result<BetaChoice> {
    if !(cfg.max_topk >= BETA_STEP) {
        return Err(Error::arg("max_topk must be at least 0.05"));
    }
    if prob.size != source.size {
        return Err(Error::Shape("probability and source blocks differ in size".into()));
    }
    let scorer = Scorer::new(source, cfg)?;
    let mut s = Search {
        prob,
        ranked: rank_voxels(prob, mask),
        scorer,
        n_input: source.occupied().len(),
        cache: HashMap::new(),
        best: None,
    };
    let patience = cfg.patience.max(1);
    let fine_max = (cfg.max_topk / BETA_STEP + 1e-9).floor() as i64;
    match cfg.mode {
        SearchMode::Full => s.scan(grid(BETA_STEP, 1, fine_max), patience),
        SearchMode::Fast => {
            let coarse_max = ((cfg.max_topk / COARSE_STEP + 1e-9).floor() as i64).max(1);
            s.scan(grid(COARSE_STEP, 1, coarse_max), patience);
            let centre = (s.best.unwrap().beta / BETA_STEP).round() as i64;
            let reach = (COARSE_STEP / BETA_STEP).round() as i64 - 1;
            s.scan(grid(BETA_STEP, centre + 1, (centre + reach).min(fine_max)), patience);
            s.scan(grid(BETA_STEP, centre - 1, (centre - reach).max(1)), patience);
        }
    }
    let mut best = s.best.expect("at least one candidate scored");
    best.evaluations = s.cache.len();
    Ok(best)
}

/// Quality the search assigns to binarizing `prob` with `k`.
pub fn evaluate_k(source: &VoxelBlock, prob: &VoxelBlock, mask: OctantMask, k: usize, cfg: &TopkConfig) -> Result<f64> {
    let scorer = Scorer::new(source, cfg)?;
    let bin = top_k(prob, k, mask)?;
    Ok(scorer.score(prob, &bin.occupied()))
}

/// Binarizes an up-sampled probability block. `original` is the
/// full-resolution source region the block reconstructs; it supplies
/// `N_input` and is the reference of the search modes. Returns the block and
/// its `k_abu`.
pub fn binarize_abu(
    prob: &VoxelBlock,
    original: &VoxelBlock,
    mask: OctantMask,
    mode: AbuTopk,
    beta_codec: f64,
    cfg: &TopkConfig,
) -> Result<(VoxelBlock, usize)> {
    let k = match mode {
        AbuTopk::None => k_from_beta(original.n_input, beta_codec),
        AbuTopk::Full | AbuTopk::Fast => {
            let c = TopkConfig {
                mode: if mode == AbuTopk::Full { SearchMode::Full } else { SearchMode::Fast },
                ..cfg.clone()
            };
            optimize_beta(original, prob, mask, &c)?.k
        }
    };
    Ok((top_k(prob, k, mask)?, k))
}
