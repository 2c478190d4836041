// SPDX-License-Identifier: Apache-2.0

//! Learned block up-sampling: a 3D U-net that turns a basic up-sampled
//! (sparse) block into per-voxel occupancy probabilities at full precision.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::nn::fit::{self, FitReport};
use crate::nn::{Checkpoint, Conv3d, ConvSpec, Graph, Irb, IrbSpec, ParamSet, Real, Tensor, TrainConfig, Var};
use crate::pointcloud::partition;
use crate::sampling::{downsample, is_power_of_two, upsample_basic};
use crate::{Error, PointCloud, Result, VoxelBlock};

/// Number of stride-2 stages of the contracting path.
pub const STAGES: usize = 3;
/// Channels of the first stage at full width.
pub const BASE_CHANNELS: usize = 16;

/// Block sizes must be a multiple of this.
pub const BLOCK_MULTIPLE: usize = 1 << STAGES;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AbuArch {
    pub channels: usize,
    pub width_divisor: usize,
}

impl AbuArch {
    pub fn new(channels: usize, width_divisor: usize) -> Result<Self> {
        if !matches!(channels, 1 | 4) {
            return Err(Error::arg("up-sampling network has 1 or 4 channels"));
        }
        if width_divisor == 0 || BASE_CHANNELS % width_divisor != 0 || BASE_CHANNELS / width_divisor < 2 {
            return Err(Error::arg("width divisor must divide 16 and leave at least 2 channels"));
        }
        Ok(AbuArch { channels, width_divisor })
    }

    pub fn base(&self) -> usize {
        BASE_CHANNELS / self.width_divisor
    }

    pub fn describe(&self) -> String {
        format!("abu;ch={};div={}", self.channels, self.width_divisor)
    }

    pub fn parse(s: &str) -> Result<Self> {
        let bad = || Error::Checkpoint(format!("not an up-sampling architecture: {s}"));
        let rest = s.strip_prefix("abu;").ok_or_else(bad)?;
        let (mut ch, mut div) = (None, None);
        for f in rest.split(';') {
            let (k, v) = f.split_once('=').ok_or_else(bad)?;
            let v: usize = v.parse().map_err(|_| bad())?;
            match k {
                "ch" => ch = Some(v),
                "div" => div = Some(v),
                _ => return Err(bad()),
            }
        }
        Self::new(ch.ok_or_else(bad)?, div.ok_or_else(bad)?).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

#[derive(Debug, Clone)]
struct Stage {
    conv: Conv3d,
    irb: Irb,
}

#[derive(Debug, Clone)]
struct UpStage {
    up: Conv3d,
    fuse: Conv3d,
    irb: Irb,
}

/// Layer layout of the U-net; weights are kept in a separate [`ParamSet`].
#[derive(Debug, Clone)]
pub struct AbuNet {
    pub arch: AbuArch,
    stem: Stage,
    down: Vec<Stage>,
    up: Vec<UpStage>,
    head: Conv3d,
}

impl AbuNet {
    pub fn build<T: Real>(arch: AbuArch, rng: &mut impl Rng) -> (Self, ParamSet<T>) {
        let mut ps = ParamSet::default();
        let c = arch.base();
        let width = |i: usize| c << i;
        let stem = Stage {
            conv: Conv3d::new(&mut ps, "stem", ConvSpec::new(arch.channels, c, 3, 1), rng),
            irb: Irb::new(&mut ps, "stem.irb", &IrbSpec::light(c), rng),
        };
        let down = (1..=STAGES)
            .map(|i| Stage {
                conv: Conv3d::new(&mut ps, &format!("down{i}"), ConvSpec::new(width(i - 1), width(i), 3, 2), rng),
                irb: Irb::new(&mut ps, &format!("down{i}.irb"), &IrbSpec::light(width(i)), rng),
            })
            .collect();
        let up = (1..=STAGES)
            .rev()
            .map(|i| UpStage {
                up: Conv3d::new(&mut ps, &format!("up{i}"), ConvSpec::transposed(width(i), width(i - 1), 3, 2), rng),
                fuse: Conv3d::new(
                    &mut ps,
                    &format!("up{i}.fuse"),
                    ConvSpec::new(2 * width(i - 1), width(i - 1), 3, 1),
                    rng,
                ),
                irb: Irb::new(&mut ps, &format!("up{i}.irb"), &IrbSpec::light(width(i - 1)), rng),
            })
            .collect();
        let head = Conv3d::new(&mut ps, "head", ConvSpec::new(c, arch.channels, 3, 1), rng);
        (
            AbuNet {
                arch,
                stem,
                down,
                up,
                head,
            },
            ps,
        )
    }

    /// Occupancy (and colour) probabilities with the input's shape.
    pub fn forward<T: Real>(&self, g: &mut Graph<T>, pv: &[Var], x: Var) -> Var {
        let stage = |g: &mut Graph<T>, s: &Stage, x: Var| {
            let y = s.conv.forward(g, pv, x);
            let y = g.relu(y);
            s.irb.forward(g, pv, y)
        };
        let mut skips = vec![stage(g, &self.stem, x)];
        for s in &self.down {
            let prev = *skips.last().unwrap();
            skips.push(stage(g, s, prev));
        }
        let mut h = skips.pop().unwrap();
        for u in &self.up {
            let y = u.up.forward(g, pv, h);
            let y = g.relu(y);
            let cat = g.concat(&[y, skips.pop().unwrap()]);
            let f = u.fuse.forward(g, pv, cat);
            let f = g.relu(f);
            h = u.irb.forward(g, pv, f);
        }
        let out = self.head.forward(g, pv, h);
        g.sigmoid(out)
    }

    /// Batch-mean distortion between the network output and the targets.
    pub fn loss_graph<T: Real>(&self, g: &mut Graph<T>, pv: &[Var], pairs: &[&AbuPair], cfg: &TrainConfig) -> Result<Var> {
        let ch = self.arch.channels;
        for p in pairs {
            if p.input.channels != ch || p.target.channels != ch || p.input.size != p.target.size {
                return Err(Error::Shape("up-sampling pair does not match the network".into()));
            }
            check_size(p.input.size)?;
        }
        let inputs: Vec<Tensor<T>> = pairs.iter().map(|p| block_tensor(&p.input)).collect();
        let targets: Vec<Tensor<T>> = pairs.iter().map(|p| block_tensor(&p.target)).collect();
        let x = Tensor::stack(&inputs.iter().collect::<Vec<_>>())?;
        let target = Tensor::stack(&targets.iter().collect::<Vec<_>>())?;
        let xv = g.constant(x);
        let out = self.forward(g, pv, xv);
        let d = if ch == 1 {
            g.focal(out, target, cfg.alpha, cfg.gamma)
        } else {
            let vol = pairs[0].target.volume();
            let mut geo = Tensor::zeros([pairs.len(), 1, target.shape[2], target.shape[3], target.shape[4]]);
            for i in 0..pairs.len() {
                geo.data[i * vol..(i + 1) * vol].copy_from_slice(target.plane(i, 0));
            }
            let occ = g.slice(out, 0, 1);
            let rgb = g.slice(out, 1, 3);
            let dg = g.focal(occ, geo, cfg.alpha, cfg.gamma);
            let dc = g.color_mse(rgb, target);
            let dg = g.scale(dg, T::of(1.0 - cfg.omega));
            let dc = g.scale(dc, T::of(cfg.omega));
            g.add(dg, dc)
        };
        Ok(g.mean(d))
    }
}

fn check_size(size: usize) -> Result<()> {
    if size == 0 || size % BLOCK_MULTIPLE != 0 {
        return Err(Error::Shape(format!(
            "up-sampling block size {size} is not a multiple of {BLOCK_MULTIPLE}"
        )));
    }
    Ok(())
}

fn block_tensor<T: Real>(b: &VoxelBlock) -> Tensor<T> {
    crate::model::block_tensor(b)
}

/// A basic up-sampled block and the full-resolution block it should
/// become.
#[derive(Debug, Clone, PartialEq)]
pub struct AbuPair {
    pub input: VoxelBlock,
    pub target: VoxelBlock,
}

/// Training pairs: every cloud is down-sampled by `sf`, basic up-sampled
/// again and cut into `region_size` blocks alongside the original.
pub fn make_abu_pairs(clouds: &[PointCloud], region_size: usize, sf: u32) -> Result<Vec<AbuPair>> {
    let mut out = Vec::new();
    for pc in clouds {
        if pc.is_empty() {
            continue;
        }
        let up = upsample_basic(&downsample(pc, sf as f64)?, sf as f64)?;
        let channels = if pc.has_colors() { 4 } else { 1 };
        for target in partition(pc, region_size)? {
            let input = VoxelBlock::from_cloud_region(&up, target.origin, region_size, channels);
            out.push(AbuPair { input, target });
        }
    }
    Ok(out)
}

/// Renders a decoded block, scaled by `sf`, into its full-resolution
/// region `[origin·sf, (origin + size)·sf)`.
pub fn basic_upsample_block(block: &VoxelBlock, sf: u32) -> VoxelBlock {
    let s = sf as usize;
    let mut out = VoxelBlock::zeros(block.origin.map(|c| c * sf), block.size * s, block.channels);
    for idx in block.occupied() {
        let c = block.coords_of(idx);
        let j = out.index(c[0] * s, c[1] * s, c[2] * s);
        out.set_point(j, block.color_at(idx));
    }
    out.n_input = block.n_input;
    out
}

/// Minibatch size used for a sampling factor.
pub fn abu_batch(sf: u32) -> usize {
    if sf == 2 {
        1
    } else {
        8
    }
}

/// A trained up-sampling network for one sampling factor.
#[derive(Debug, Clone)]
pub struct AbuModel {
    pub net: AbuNet,
    pub params: ParamSet<f32>,
    pub sf: u32,
}

impl AbuModel {
    pub fn new(arch: AbuArch, sf: u32, seed: u64) -> Self {
        let (net, params) = AbuNet::build(arch, &mut ChaCha8Rng::seed_from_u64(seed));
        AbuModel { net, params, sf }
    }

    pub fn arch(&self) -> AbuArch {
        self.net.arch
    }

    /// Probability block with the input's origin, size and channel count.
    pub fn forward(&self, block: &VoxelBlock) -> Result<VoxelBlock> {
        if block.channels != self.arch().channels {
            return Err(Error::ModelMismatch(format!(
                "{}-channel block for a {}-channel up-sampling network",
                block.channels,
                self.arch().channels
            )));
        }
        check_size(block.size)?;
        let mut g = Graph::new();
        let pv = self.params.bind(&mut g, false);
        let x = g.constant(block_tensor::<f32>(block));
        let y = self.net.forward(&mut g, &pv, x);
        let mut out = block.clone();
        out.data = g.take_value(y).data;
        Ok(out)
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.arch().describe(), self.params.clone());
        ck.meta.insert("sf".into(), self.sf.to_string());
        ck
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let arch = AbuArch::parse(&ck.arch)?;
        let sf: u32 = ck
            .meta
            .get("sf")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Checkpoint("up-sampling checkpoint lacks sf".into()))?;
        let mut m = AbuModel::new(arch, sf, 0);
        let same = m.params.names == ck.params.names
            && m.params.tensors.iter().zip(&ck.params.tensors).all(|(a, b)| a.shape == b.shape);
        if !same {
            return Err(Error::Checkpoint("parameter layout does not match architecture".into()));
        }
        m.params = ck.params;
        Ok(m)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

/// Trains an up-sampling network for factor `sf` on distortion alone. The
/// minibatch size follows [`abu_batch`]; the other settings come from `cfg`.
pub fn train_abu(arch: AbuArch, sf: u32, train: &[AbuPair], val: &[AbuPair], cfg: &TrainConfig) -> Result<(AbuModel, FitReport)> {
    if sf < 2 || !is_power_of_two(sf as f64) {
        return Err(Error::arg(format!(
            "learned up-sampling needs a power-of-2 sampling factor of at least 2, got {sf}"
        )));
    }
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::arg("empty training set"));
    }
    let mut model = AbuModel::new(arch, sf, cfg.seed);
    let net = model.net.clone();
    let opts = fit::FitOptions {
        batch: abu_batch(sf),
        ..cfg.fit_options()
    };
    let report = fit::fit(&mut model.params, train, val, &opts, |g, pv, b, _| net.loss_graph(g, pv, b, cfg))?;
    Ok((model, report))
}
