// SPDX-License-Identifier: Apache-2.0

//! Learned block-based point cloud codec.
//!
//! A point cloud is voxelized, optionally down-sampled, split into disjoint
//! cubic blocks and every block is coded with a convolutional autoencoder
//! whose latents are entropy coded under a mean-scale hyperprior. At the
//! decoder the voxel occupancy probabilities are turned back into points with
//! an encoder-optimized Top-k selection, optionally densified by a learned
//! up-sampling U-net, and merged into the reconstructed cloud.

pub mod abu;
pub mod binarization;
pub mod cli;
pub mod entropy;
mod error;
pub mod model;
pub mod nn;
pub mod pipeline;
pub mod pointcloud;
pub mod quality;
pub mod sampling;
pub mod spatial;

pub use error::{Error, Result};
pub use pointcloud::{OctantMask, PointCloud, VoxelBlock};

/// Round half away from zero. This is the single rounding rule used across
/// voxelization, sampling, quantization and Top-k parameter computation.
#[inline]
pub fn round_half_away(x: f64) -> f64 {
    x.round()
}
