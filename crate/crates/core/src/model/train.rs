// SPDX-License-Identifier: Apache-2.0

use super::{Codec, CodecArch, CodecNet};
use crate::nn::fit::{self, FitReport};
use crate::nn::{ParamSet, TrainConfig};
use crate::pointcloud::partition;
use crate::sampling::downsample;
use crate::{Error, PointCloud, Result, VoxelBlock};

/// Blocks with fewer occupied voxels than this are left out of training.
pub const MIN_TRAINING_POINTS: usize = 500;

pub type TrainReport = FitReport;

/// Partitions every cloud (after optional down-sampling by `sf`) and keeps
/// blocks holding at least [`MIN_TRAINING_POINTS`] points.
pub fn make_training_blocks(clouds: &[PointCloud], block_size: usize, sf: Option<f64>) -> Result<Vec<VoxelBlock>> {
    let mut out = Vec::new();
    for pc in clouds {
        let pc = match sf {
            Some(s) if s != 1.0 => downsample(pc, s)?,
            _ => pc.clone(),
        };
        if pc.is_empty() {
            continue;
        }
        out.extend(
            partition(&pc, block_size)?
                .into_iter()
                .filter(|b| b.n_input >= MIN_TRAINING_POINTS),
        );
    }
    Ok(out)
}

/// Mean per-block loss of `blocks` with fixed-seed noise.
pub fn evaluate_loss(net: &CodecNet, params: &ParamSet<f32>, blocks: &[VoxelBlock], cfg: &TrainConfig) -> Result<f64> {
    fit::evaluate(params, blocks, cfg.batch, &|g, pv, b, rng| net.loss_graph(g, pv, b, cfg, rng))
}

/// Trains a fresh codec on the noisy rate/distortion loss. The returned
/// weights are those of the best validation epoch.
pub fn train(arch: CodecArch, train_set: &[VoxelBlock], val: &[VoxelBlock], cfg: &TrainConfig) -> Result<(Codec, TrainReport)> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::arg("empty training set"));
    }
    let mut codec = Codec::new(arch, cfg.lambda, cfg.seed);
    let net = codec.net.clone();
    let report = fit::fit(&mut codec.params, train_set, val, &cfg.fit_options(), |g, pv, b, rng| {
        net.loss_graph(g, pv, b, cfg, rng)
    })?;
    Ok((codec, report))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense_cloud(side: u32, offset: [u32; 3]) -> PointCloud {
        let mut pts = Vec::new();
        for x in 0..side {
            for y in 0..side {
                for z in 0..side {
                    pts.push([x + offset[0], y + offset[1], z + offset[2]]);
                }
            }
        }
        PointCloud::from_voxels(pts, None).unwrap()
    }

    #[test]
    fn block_filter_threshold() {
        // 7·8·8 = 448 points then 500 points, each in its own 16³ block
        let small = dense_cloud(8, [0; 3]).filter(|p| p[0] < 7);
        assert_eq!(small.len(), 448);
        assert!(make_training_blocks(&[small], 16, None).unwrap().is_empty());
        let mut pts: Vec<[u32; 3]> = dense_cloud(8, [0; 3]).points().to_vec();
        pts.truncate(500);
        let exact = PointCloud::from_voxels(pts, None).unwrap();
        assert_eq!(make_training_blocks(&[exact], 16, None).unwrap().len(), 1);
    }

    #[test]
    fn block_count_matches_filtered_partition() {
        let pc = PointCloud::from_voxels(
            dense_cloud(12, [0; 3])
                .points()
                .iter()
                .chain(dense_cloud(6, [40, 0, 0]).points())
                .copied()
                .collect(),
            None,
        )
        .unwrap();
        let all = partition(&pc, 16).unwrap();
        let expected = all.iter().filter(|b| b.n_input >= 500).count();
        assert_eq!(make_training_blocks(&[pc], 16, None).unwrap().len(), expected);
    }

    #[test]
    fn empty_training_set_rejected() {
        let arch = CodecArch::new(1, 8, 0).unwrap();
        assert!(train(arch, &[], &[], &TrainConfig::default()).is_err());
    }

    #[test]
    fn zero_learning_rate_stops_after_patience() {
        let arch = CodecArch::new(1, 8, 0).unwrap();
        let blocks = partition(&dense_cloud(5, [1, 1, 1]), 8).unwrap();
        let cfg = TrainConfig {
            learning_rate: 0.0,
            batch: 4,
            max_epochs: 50,
            width_divisor: 8,
            hyper_strides: 0,
            ..TrainConfig::default()
        };
        let (_, report) = train(arch, &blocks, &[], &cfg).unwrap();
        assert!(report.stopped_early);
        assert_eq!(report.epochs(), 1 + cfg.patience);
        assert_eq!(report.best_epoch, 0);
    }
}
