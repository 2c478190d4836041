// SPDX-License-Identifier: Apache-2.0

//! Learned block codec: analysis/synthesis transforms, a mean-scale
//! hyperprior with a fixed factorized prior on the hyper-latents, explicit
//! quantization and the rate/distortion training objective.

mod train;

pub use train::{evaluate_loss, make_training_blocks, train, TrainReport};

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::entropy::{self, FactorizedPrior, SymbolModel};
use crate::nn::{likelihood, Checkpoint, Conv3d, ConvSpec, Graph, Irb, IrbSpec, ParamSet, Real, Tensor, TrainConfig, Var};
use crate::{round_half_away, Error, Result, VoxelBlock};

/// Spatial down-sampling of the analysis transform (three stride-2 stages).
pub const LATENT_STRIDE: usize = 8;
pub const SIGMA_MIN: f64 = 1e-3;
/// Supported rate/distortion trade-offs; a model's id is its index here.
pub const LAMBDAS: [f64; 6] = [0.00025, 0.0005, 0.001, 0.0025, 0.005, 0.01];
pub const CUSTOM_MODEL_ID: u8 = 255;

pub fn model_id(lambda: f64) -> u8 {
    LAMBDAS
        .iter()
        .position(|&l| (l - lambda).abs() <= 1e-12)
        .map_or(CUSTOM_MODEL_ID, |i| i as u8)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CodecArch {
    pub in_channels: usize,
    /// Divides the 32/64/128 filter ramp; 1 is the full-width network.
    pub width_divisor: usize,
    pub hyper_strides: usize,
}

impl CodecArch {
    pub fn new(in_channels: usize, width_divisor: usize, hyper_strides: usize) -> Result<Self> {
        if !matches!(in_channels, 1 | 4) {
            return Err(Error::arg("codec input has 1 or 4 channels"));
        }
        if width_divisor == 0 || 32 % width_divisor != 0 {
            return Err(Error::arg("width divisor must divide 32"));
        }
        if hyper_strides > 2 {
            return Err(Error::arg("hyper transforms have at most 2 stride-2 layers"));
        }
        Ok(CodecArch {
            in_channels,
            width_divisor,
            hyper_strides,
        })
    }

    pub fn from_config(in_channels: usize, cfg: &TrainConfig) -> Result<Self> {
        Self::new(in_channels, cfg.width_divisor, cfg.hyper_strides)
    }

    pub fn widths(&self) -> [usize; 3] {
        [32, 64, 128].map(|w| w / self.width_divisor)
    }

    pub fn latent_channels(&self) -> usize {
        self.widths()[2]
    }

    /// Block sizes must be a multiple of this.
    pub fn block_multiple(&self) -> usize {
        LATENT_STRIDE << self.hyper_strides
    }

    pub fn check_block_size(&self, b: usize) -> Result<()> {
        if b == 0 || b % self.block_multiple() != 0 {
            return Err(Error::Shape(format!(
                "block size {b} is not a multiple of {} required by the codec",
                self.block_multiple()
            )));
        }
        Ok(())
    }

    pub fn latent_shape(&self, b: usize) -> [usize; 5] {
        let n = b / LATENT_STRIDE;
        [1, self.latent_channels(), n, n, n]
    }

    pub fn hyper_shape(&self, b: usize) -> [usize; 5] {
        let n = b / self.block_multiple();
        [1, self.latent_channels(), n, n, n]
    }

    pub fn describe(&self) -> String {
        format!(
            "codec;in={};div={};hyper={}",
            self.in_channels, self.width_divisor, self.hyper_strides
        )
    }

    pub fn parse(s: &str) -> Result<Self> {
        let mut fields = s.split(';');
        if fields.next() != Some("codec") {
            return Err(Error::Checkpoint(format!("not a codec architecture: {s}")));
        }
        let mut vals = [None; 3];
        for f in fields {
            let (k, v) = f
                .split_once('=')
                .ok_or_else(|| Error::Checkpoint(format!("bad architecture field {f}")))?;
            let v: usize = v
                .parse()
                .map_err(|_| Error::Checkpoint(format!("bad architecture value {f}")))?;
            match k {
                "in" => vals[0] = Some(v),
                "div" => vals[1] = Some(v),
                "hyper" => vals[2] = Some(v),
                _ => return Err(Error::Checkpoint(format!("unknown architecture field {k}"))),
            }
        }
        match vals {
            [Some(a), Some(b), Some(c)] => Self::new(a, b, c).map_err(|e| Error::Checkpoint(e.to_string())),
            _ => Err(Error::Checkpoint(format!("incomplete architecture {s}"))),
        }
    }
}

#[derive(Debug, Clone)]
enum Layer {
    Conv { conv: Conv3d, relu: bool },
    Irb(Irb),
}

fn conv_layer<T: Real>(ps: &mut ParamSet<T>, name: &str, spec: ConvSpec, relu: bool, rng: &mut impl Rng) -> Layer {
    Layer::Conv {
        conv: Conv3d::new(ps, name, spec, rng),
        relu,
    }
}

fn run_layers<T: Real>(layers: &[Layer], g: &mut Graph<T>, pv: &[Var], mut x: Var) -> Var {
    for l in layers {
        x = match l {
            Layer::Conv { conv, relu } => {
                let y = conv.forward(g, pv, x);
                if *relu {
                    g.relu(y)
                } else {
                    y
                }
            }
            Layer::Irb(b) => b.forward(g, pv, x),
        };
    }
    x
}

/// Layer layout of the codec; parameters live in a separate [`ParamSet`]
/// so the same layout runs in 32-bit and 64-bit.
#[derive(Debug, Clone)]
pub struct CodecNet {
    pub arch: CodecArch,
    analysis: Vec<Layer>,
    synthesis: Vec<Layer>,
    hyper_analysis: Vec<Layer>,
    hyper_synthesis: Vec<Layer>,
    prior_loc: usize,
    prior_log_scale: usize,
}

impl CodecNet {
    pub fn build<T: Real>(arch: CodecArch, rng: &mut impl Rng) -> (Self, ParamSet<T>) {
        let mut ps = ParamSet::default();
        let [c1, c2, c3] = arch.widths();
        let cin = arch.in_channels;
        let ps = &mut ps;
        let analysis = vec![
            conv_layer(ps, "ga.0", ConvSpec::new(cin, c1, 5, 1), true, rng),
            conv_layer(ps, "ga.1", ConvSpec::new(c1, c2, 3, 2), true, rng),
            Layer::Irb(Irb::new(ps, "ga.irb1", &IrbSpec::codec(c2), rng)),
            conv_layer(ps, "ga.2", ConvSpec::new(c2, c3, 3, 2), true, rng),
            Layer::Irb(Irb::new(ps, "ga.irb2", &IrbSpec::codec(c3), rng)),
            conv_layer(ps, "ga.3", ConvSpec::new(c3, c3, 3, 2), false, rng),
        ];
        let synthesis = vec![
            conv_layer(ps, "gs.0", ConvSpec::transposed(c3, c3, 3, 2), true, rng),
            Layer::Irb(Irb::new(ps, "gs.irb1", &IrbSpec::codec(c3), rng)),
            conv_layer(ps, "gs.1", ConvSpec::transposed(c3, c2, 3, 2), true, rng),
            Layer::Irb(Irb::new(ps, "gs.irb2", &IrbSpec::codec(c2), rng)),
            conv_layer(ps, "gs.2", ConvSpec::transposed(c2, c1, 3, 2), true, rng),
            conv_layer(ps, "gs.3", ConvSpec::new(c1, cin, 5, 1), false, rng),
        ];
        let s1 = if arch.hyper_strides >= 1 { 2 } else { 1 };
        let s2 = if arch.hyper_strides >= 2 { 2 } else { 1 };
        let up = |i: usize, o: usize, s: usize| {
            if s == 2 {
                ConvSpec::transposed(i, o, 3, 2)
            } else {
                ConvSpec::new(i, o, 3, 1)
            }
        };
        let hyper_analysis = vec![
            conv_layer(ps, "ha.0", ConvSpec::new(c3, c3, 3, 1), true, rng),
            conv_layer(ps, "ha.1", ConvSpec::new(c3, c3, 3, s1), true, rng),
            conv_layer(ps, "ha.2", ConvSpec::new(c3, c3, 3, s2), false, rng),
        ];
        let hyper_synthesis = vec![
            conv_layer(ps, "hs.0", up(c3, c3, s2), true, rng),
            conv_layer(ps, "hs.1", up(c3, c3, s1), true, rng),
            conv_layer(ps, "hs.2", ConvSpec::new(c3, 2 * c3, 3, 1), false, rng),
        ];
        let prior_loc = ps.add("prior.loc", Tensor::zeros([1, c3, 1, 1, 1]));
        let prior_log_scale = ps.add("prior.log_scale", Tensor::zeros([1, c3, 1, 1, 1]));
        (
            CodecNet {
                arch,
                analysis,
                synthesis,
                hyper_analysis,
                hyper_synthesis,
                prior_loc,
                prior_log_scale,
            },
            std::mem::take(ps),
        )
    }

    pub fn analysis<T: Real>(&self, g: &mut Graph<T>, pv: &[Var], x: Var) -> Var {
        run_layers(&self.analysis, g, pv, x)
    }

    /// Probabilities in [0, 1]: occupancy first, then RGB in joint mode.
    pub fn synthesis<T: Real>(&self, g: &mut Graph<T>, pv: &[Var], y: Var) -> Var {
        let x = run_layers(&self.synthesis, g, pv, y);
        g.sigmoid(x)
    }

    pub fn hyper_analysis<T: Real>(&self, g: &mut Graph<T>, pv: &[Var], y: Var) -> Var {
        run_layers(&self.hyper_analysis, g, pv, y)
    }

    /// Per-element mean and scale of the latents, `sigma >= SIGMA_MIN`.
    pub fn hyper_synthesis<T: Real>(&self, g: &mut Graph<T>, pv: &[Var], z: Var) -> (Var, Var) {
        let h = run_layers(&self.hyper_synthesis, g, pv, z);
        let c = self.arch.latent_channels();
        let mu = g.slice(h, 0, c);
        let raw = g.slice(h, c, c);
        let sp = g.softplus(raw);
        (mu, g.add_scalar(sp, T::of(SIGMA_MIN)))
    }

    pub fn prior_vars(&self, pv: &[Var]) -> (Var, Var) {
        (pv[self.prior_loc], pv[self.prior_log_scale])
    }

    /// Batch-mean of `D + λ·bits/N_input` with additive uniform noise
    /// standing in for rounding.
    pub fn loss_graph<T: Real>(
        &self,
        g: &mut Graph<T>,
        pv: &[Var],
        blocks: &[&VoxelBlock],
        cfg: &TrainConfig,
        rng: &mut impl Rng,
    ) -> Result<Var> {
        let cin = self.arch.in_channels;
        let tensors: Vec<Tensor<T>> = blocks
            .iter()
            .map(|b| {
                if b.channels != cin {
                    return Err(Error::Shape(format!(
                        "{}-channel block for a {cin}-channel codec",
                        b.channels
                    )));
                }
                self.arch.check_block_size(b.size)?;
                Ok(block_tensor(b))
            })
            .collect::<Result<_>>()?;
        let x = Tensor::stack(&tensors.iter().collect::<Vec<_>>())?;
        let geo_target = if cin == 1 {
            x.clone()
        } else {
            let n = blocks.len();
            let vol = blocks[0].volume();
            let mut t = Tensor::zeros([n, 1, x.shape[2], x.shape[3], x.shape[4]]);
            for i in 0..n {
                t.data[i * vol..(i + 1) * vol].copy_from_slice(x.plane(i, 0));
            }
            t
        };
        let xv = g.constant(x.clone());
        let y = self.analysis(g, pv, xv);
        let y_noisy = add_noise(g, y, rng);
        let z = self.hyper_analysis(g, pv, y);
        let z_noisy = add_noise(g, z, rng);
        let (mu, sigma) = self.hyper_synthesis(g, pv, z_noisy);
        let bits_y = g.gaussian_bits(y_noisy, mu, sigma);
        let (loc, ls) = self.prior_vars(pv);
        let bits_z = g.logistic_bits(z_noisy, loc, ls);
        let bits = g.add(bits_y, bits_z);
        let inv_n: Vec<T> = blocks.iter().map(|b| T::of(1.0 / b.n_input.max(1) as f64)).collect();
        let inv_n = g.constant(Tensor::from_vec([blocks.len(), 1, 1, 1, 1], inv_n)?);
        let rate = g.mul(bits, inv_n);
        let out = self.synthesis(g, pv, y_noisy);
        let d = if cin == 1 {
            g.focal(out, geo_target, cfg.alpha, cfg.gamma)
        } else {
            let geo = g.slice(out, 0, 1);
            let rgb = g.slice(out, 1, 3);
            let dg = g.focal(geo, geo_target, cfg.alpha, cfg.gamma);
            let dc = g.color_mse(rgb, x);
            let dg = g.scale(dg, T::of(1.0 - cfg.omega));
            let dc = g.scale(dc, T::of(cfg.omega));
            g.add(dg, dc)
        };
        let weighted = g.scale(rate, T::of(cfg.lambda));
        let per_block = g.add(d, weighted);
        Ok(g.mean(per_block))
    }
}

fn add_noise<T: Real>(g: &mut Graph<T>, v: Var, rng: &mut impl Rng) -> Var {
    let noise = noise_tensor(g.value(v).shape, rng);
    let n = g.constant(noise);
    g.add(v, n)
}

fn noise_tensor<T: Real>(shape: [usize; 5], rng: &mut impl Rng) -> Tensor<T> {
    let mut t = Tensor::zeros(shape);
    t.data.iter_mut().for_each(|v| *v = T::of(rng.random_range(-0.5..0.5)));
    t
}

/// `y + U(-0.5, 0.5)` elementwise: the differentiable stand-in for rounding.
pub fn noise_proxy<T: Real>(y: &Tensor<T>, rng: &mut impl Rng) -> Tensor<T> {
    let mut out = noise_tensor(y.shape, rng);
    out.add_assign(y);
    out
}

pub fn block_tensor<T: Real>(b: &VoxelBlock) -> Tensor<T> {
    let s = b.size;
    Tensor {
        shape: [1, b.channels, s, s, s],
        data: b.data.iter().map(|&v| T::of(v as f64)).collect(),
    }
}

/// `round(y / qs)`, half away from zero.
pub fn quantize(y: &[f32], qs: f32) -> Result<Vec<i32>> {
    if !(qs > 0.0 && qs.is_finite()) {
        return Err(Error::arg("quantization step must be positive"));
    }
    Ok(y.iter().map(|&v| round_half_away(v as f64 / qs as f64) as i32).collect())
}

pub fn dequantize(q: &[i32], qs: f32) -> Vec<f32> {
    q.iter().map(|&v| (v as f64 * qs as f64) as f32).collect()
}

/// Conditional model of one integer latent under step `qs`.
pub fn latent_model(mu: f32, sigma: f32, qs: f32) -> SymbolModel {
    entropy::build_symbol_model(mu / qs, sigma / qs)
}

/// Ideal cost `-Σ log2 P(q)` of quantized latents under the hyperprior's
/// Gaussians.
pub fn rate_estimate_latents(q: &[i32], mu: &[f32], sigma: &[f32], qs: f32) -> f64 {
    q.iter()
        .zip(mu.iter().zip(sigma))
        .map(|(&v, (&m, &s))| likelihood::bits(likelihood::gaussian(v as f64, (m / qs) as f64, (s / qs) as f64)))
        .sum()
}

/// Ideal cost of hyper-latents (channel-major, `per_channel` per channel)
/// under the factorized prior.
pub fn rate_estimate_hyper(zhat: &[i32], prior: &FactorizedPrior, per_channel: usize) -> f64 {
    zhat.iter()
        .enumerate()
        .map(|(i, &v)| likelihood::bits(prior.likelihood(i / per_channel.max(1), v as f64)))
        .sum()
}

/// `D + λ·R`, with `rate` already expressed per input point.
pub fn rd_loss(distortion: f64, rate: f64, lambda: f64) -> f64 {
    distortion + lambda * rate
}

/// Rate/distortion loss of a decoded probability block against its source,
/// with `rate_bits` normalized by the source's point count.
pub fn block_rd_loss(block: &VoxelBlock, decoded: &VoxelBlock, rate_bits: f64, cfg: &TrainConfig) -> Result<f64> {
    if block.channels != decoded.channels || block.size != decoded.size {
        return Err(Error::Shape("source and decoded blocks differ in shape".into()));
    }
    let dg = crate::nn::focal_loss(block.geometry(), decoded.geometry(), cfg.alpha, cfg.gamma)?;
    let d = if block.is_colored() {
        crate::nn::total_distortion(dg, crate::nn::color_mse(block, decoded)?, cfg.omega)
    } else {
        dg
    };
    Ok(rd_loss(d, rate_bits / block.n_input.max(1) as f64, cfg.lambda))
}

/// Entropy-coded latents of one block.
#[derive(Debug, Clone, PartialEq)]
pub struct CodedLatents {
    pub side: Vec<u8>,
    pub main: Vec<u8>,
    /// Dequantized latents exactly as the decoder will rebuild them.
    pub y_hat: Tensor<f32>,
    /// Ideal bits of side and main symbols.
    pub estimated_bits: f64,
}

/// A trained codec with 32-bit weights.
#[derive(Debug, Clone)]
pub struct Codec {
    pub net: CodecNet,
    pub params: ParamSet<f32>,
    pub lambda: f64,
}

impl Codec {
    pub fn new(arch: CodecArch, lambda: f64, seed: u64) -> Self {
        let (net, params) = CodecNet::build(arch, &mut ChaCha8Rng::seed_from_u64(seed));
        Codec { net, params, lambda }
    }

    pub fn arch(&self) -> CodecArch {
        self.net.arch
    }

    pub fn model_id(&self) -> u8 {
        model_id(self.lambda)
    }

    pub fn prior(&self) -> FactorizedPrior {
        FactorizedPrior {
            loc: self.params.tensors[self.net.prior_loc].data.clone(),
            log_scale: self.params.tensors[self.net.prior_log_scale].data.clone(),
        }
    }

    fn run<R>(&self, f: impl FnOnce(&CodecNet, &mut Graph<f32>, &[Var]) -> R) -> R {
        let mut g = Graph::new();
        let pv = self.params.bind(&mut g, false);
        f(&self.net, &mut g, &pv)
    }

    fn check_block(&self, b: &VoxelBlock) -> Result<()> {
        if b.channels != self.arch().in_channels {
            return Err(Error::ModelMismatch(format!(
                "{}-channel block for a {}-channel codec",
                b.channels,
                self.arch().in_channels
            )));
        }
        self.arch().check_block_size(b.size)
    }

    /// Real-valued latents `y` and hyper-latents `z` of a block.
    pub fn analyze(&self, block: &VoxelBlock) -> Result<(Tensor<f32>, Tensor<f32>)> {
        self.check_block(block)?;
        Ok(self.run(|net, g, pv| {
            let x = g.constant(block_tensor(block));
            let y = net.analysis(g, pv, x);
            let z = net.hyper_analysis(g, pv, y);
            (g.value(y).clone(), g.value(z).clone())
        }))
    }

    /// Mean and scale of every latent given decoded hyper-latents.
    pub fn hyper_params(&self, zhat: &Tensor<f32>) -> (Tensor<f32>, Tensor<f32>) {
        self.run(|net, g, pv| {
            let z = g.constant(zhat.clone());
            let (mu, sigma) = net.hyper_synthesis(g, pv, z);
            (g.value(mu).clone(), g.value(sigma).clone())
        })
    }

    /// Occupancy (and colour) probabilities decoded from latents.
    pub fn synthesize(&self, y_hat: &Tensor<f32>, origin: [u32; 3], size: usize) -> Result<VoxelBlock> {
        self.arch().check_block_size(size)?;
        if y_hat.shape != self.arch().latent_shape(size) {
            return Err(Error::Shape(format!("latent shape {:?} for block size {size}", y_hat.shape)));
        }
        let out = self.run(|net, g, pv| {
            let y = g.constant(y_hat.clone());
            let x = net.synthesis(g, pv, y);
            g.take_value(x)
        });
        let mut b = VoxelBlock::zeros(origin, size, self.arch().in_channels);
        b.data = out.data;
        Ok(b)
    }

    fn side_models(&self, size: usize) -> (Vec<SymbolModel>, usize) {
        let per = self.arch().hyper_shape(size)[2..].iter().product();
        (self.prior().models(), per)
    }

    pub fn encode_latents(&self, block: &VoxelBlock, qs: f32) -> Result<CodedLatents> {
        let (y, z) = self.analyze(block)?;
        let zhat: Vec<i32> = z.data.iter().map(|&v| round_half_away(v as f64) as i32).collect();
        let (side_models, per) = self.side_models(block.size);
        let side_refs: Vec<&SymbolModel> = (0..zhat.len()).map(|i| &side_models[i / per]).collect();
        let side = entropy::range_encode(&zhat, &side_refs)?;
        let zt = Tensor::from_vec(z.shape, zhat.iter().map(|&v| v as f32).collect())?;
        let (mu, sigma) = self.hyper_params(&zt);
        let q = quantize(&y.data, qs)?;
        let models = main_models(&mu.data, &sigma.data, qs);
        let main = entropy::range_encode(&q, &models.iter().collect::<Vec<_>>())?;
        let estimated_bits =
            rate_estimate_hyper(&zhat, &self.prior(), per) + rate_estimate_latents(&q, &mu.data, &sigma.data, qs);
        Ok(CodedLatents {
            side,
            main,
            y_hat: Tensor::from_vec(y.shape, dequantize(&q, qs))?,
            estimated_bits,
        })
    }

    pub fn decode_latents(&self, side: &[u8], main: &[u8], size: usize, qs: f32) -> Result<Tensor<f32>> {
        self.arch().check_block_size(size)?;
        let (side_models, per) = self.side_models(size);
        let zshape = self.arch().hyper_shape(size);
        let count: usize = zshape.iter().product();
        let side_refs: Vec<&SymbolModel> = (0..count).map(|i| &side_models[i / per]).collect();
        let zhat = entropy::range_decode(side, &side_refs)?;
        let zt = Tensor::from_vec(zshape, zhat.iter().map(|&v| v as f32).collect())?;
        let (mu, sigma) = self.hyper_params(&zt);
        let models = main_models(&mu.data, &sigma.data, qs);
        let q = entropy::range_decode(main, &models.iter().collect::<Vec<_>>())?;
        Tensor::from_vec(self.arch().latent_shape(size), dequantize(&q, qs))
    }

    pub fn to_checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.arch().describe(), self.params.clone());
        ck.meta.insert("lambda".into(), format!("{}", self.lambda));
        ck.meta.insert("model_id".into(), self.model_id().to_string());
        ck
    }

    pub fn from_checkpoint(ck: Checkpoint) -> Result<Self> {
        let arch = CodecArch::parse(&ck.arch)?;
        let lambda: f64 = ck
            .meta
            .get("lambda")
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::Checkpoint("codec checkpoint lacks lambda".into()))?;
        let mut codec = Codec::new(arch, lambda, 0);
        let same_layout = codec.params.names == ck.params.names
            && codec
                .params
                .tensors
                .iter()
                .zip(&ck.params.tensors)
                .all(|(a, b)| a.shape == b.shape);
        if !same_layout {
            return Err(Error::Checkpoint("parameter layout does not match architecture".into()));
        }
        codec.params = ck.params;
        Ok(codec)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        self.to_checkpoint().save(path)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_checkpoint(Checkpoint::load(path)?)
    }
}

fn main_models(mu: &[f32], sigma: &[f32], qs: f32) -> Vec<SymbolModel> {
    mu.par_iter()
        .zip(sigma)
        .map(|(&m, &s)| latent_model(m, s, qs))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::PointCloud;

    fn toy(in_channels: usize, hyper: usize) -> Codec {
        Codec::new(CodecArch::new(in_channels, 8, hyper).unwrap(), 0.001, 11)
    }

    fn plane_block(size: usize, colored: bool) -> VoxelBlock {
        let mut b = VoxelBlock::zeros([0; 3], size, if colored { 4 } else { 1 });
        for x in 0..size {
            for y in 0..size {
                let idx = b.index(x, y, (x + y) / 3 % size);
                b.set_point(idx, colored.then_some([200, (x * 10) as u8, (y * 10) as u8]));
            }
        }
        b.n_input = b.occupied().len();
        b
    }

    #[test]
    fn quantize_examples() {
        assert_eq!(quantize(&[2.4], 1.0).unwrap(), vec![2]);
        assert_eq!(dequantize(&[2], 1.0), vec![2.0]);
        assert_eq!(quantize(&[2.4], 0.5).unwrap(), vec![5]);
        assert_eq!(dequantize(&[5], 0.5), vec![2.5]);
        assert_eq!(quantize(&[2.4], 2.0).unwrap(), vec![1]);
        assert_eq!(dequantize(&[1], 2.0), vec![2.0]);
        assert_eq!(quantize(&[-0.5, 0.5, -1.5], 1.0).unwrap(), vec![-1, 1, -2]);
        assert!(quantize(&[1.0], 0.0).is_err());
        assert!(quantize(&[1.0], -1.0).is_err());
    }

    #[test]
    fn noise_proxy_bounds_and_mean() {
        let y = Tensor::<f64>::zeros([1, 1, 1, 1, 100_000]);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = noise_proxy(&y, &mut rng);
        assert!(n.data.iter().all(|&v| (-0.5..0.5).contains(&v)));
        assert!((n.sum() / 1e5).abs() < 0.01);
        let again = noise_proxy(&y, &mut ChaCha8Rng::seed_from_u64(5));
        assert_eq!(n, again);
    }

    #[test]
    fn rd_loss_examples() {
        assert_eq!(rd_loss(0.3, 5.0, 0.0), 0.3);
        assert!((rd_loss(1.0, 100.0, 0.01) - 2.0).abs() < 1e-12);
        assert!(rd_loss(1.1, 100.0, 0.01) > rd_loss(1.0, 100.0, 0.01));
        assert!(rd_loss(1.0, 101.0, 0.01) > rd_loss(1.0, 100.0, 0.01));
    }

    #[test]
    fn model_ids() {
        for (i, &l) in LAMBDAS.iter().enumerate() {
            assert_eq!(model_id(l), i as u8);
        }
        assert_eq!(model_id(0.3), CUSTOM_MODEL_ID);
    }

    #[test]
    fn arch_strings_round_trip() {
        let a = CodecArch::new(4, 4, 1).unwrap();
        assert_eq!(CodecArch::parse(&a.describe()).unwrap(), a);
        assert_eq!(CodecArch::new(1, 1, 2).unwrap().widths(), [32, 64, 128]);
        assert_eq!(CodecArch::new(1, 8, 0).unwrap().widths(), [4, 8, 16]);
        assert!(CodecArch::new(2, 1, 0).is_err());
        assert!(CodecArch::new(1, 3, 0).is_err());
        assert!(CodecArch::parse("abu;in=1").is_err());
    }

    #[test]
    fn shape_contracts() {
        let c = toy(1, 1);
        let b = plane_block(16, false);
        let (y, z) = c.analyze(&b).unwrap();
        assert_eq!(y.shape, [1, 16, 2, 2, 2]);
        assert_eq!(z.shape, [1, 16, 1, 1, 1]);
        assert!(y.all_finite());
        let (mu, sigma) = c.hyper_params(&z);
        assert_eq!(mu.shape, y.shape);
        assert!(sigma.data.iter().all(|&s| s as f64 >= SIGMA_MIN));
        let out = c.synthesize(&y, [0; 3], 16).unwrap();
        assert_eq!(out.data.len(), 16 * 16 * 16);
        assert!(out.data.iter().all(|&p| (0.0..=1.0).contains(&p)));
        assert!(c.analyze(&plane_block(8, false)).is_err());
        let empty = VoxelBlock::zeros([0; 3], 16, 1);
        assert!(c.analyze(&empty).unwrap().0.all_finite());
    }

    #[test]
    fn deterministic_forward() {
        let c = toy(4, 0);
        let b = plane_block(8, true);
        assert_eq!(c.analyze(&b).unwrap(), c.analyze(&b).unwrap());
        let (y, _) = c.analyze(&b).unwrap();
        let out = c.synthesize(&y, [0; 3], 8).unwrap();
        assert_eq!(out.channels, 4);
        assert_eq!(out, c.synthesize(&y, [0; 3], 8).unwrap());
    }

    #[test]
    fn latents_round_trip_through_coder() {
        let c = toy(1, 1);
        let b = plane_block(16, false);
        for qs in [1.0f32, 1.25, 2.0] {
            let coded = c.encode_latents(&b, qs).unwrap();
            let y_hat = c.decode_latents(&coded.side, &coded.main, 16, qs).unwrap();
            assert_eq!(y_hat, coded.y_hat);
            let enc = c.synthesize(&coded.y_hat, [0; 3], 16).unwrap();
            let dec = c.synthesize(&y_hat, [0; 3], 16).unwrap();
            assert_eq!(enc, dec);
        }
    }

    #[test]
    fn estimate_is_sum_of_elements() {
        let q = [0, 1, -2];
        let mu = [0.1f32, 0.5, -1.0];
        let sigma = [0.5f32, 2.0, 1.0];
        let total = rate_estimate_latents(&q, &mu, &sigma, 1.0);
        let parts: f64 = (0..3)
            .map(|i| rate_estimate_latents(&q[i..i + 1], &mu[i..i + 1], &sigma[i..i + 1], 1.0))
            .sum();
        assert!((total - parts).abs() < 1e-12);
        let single = rate_estimate_latents(&[0], &[0.0], &[0.5], 1.0);
        assert!((single - 0.550699).abs() < 1e-6);
        assert!(rate_estimate_latents(&[3], &[3.0], &[1000.0], 1.0) > 0.0);
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("codec.ck");
        let c = toy(1, 1);
        c.save(&path).unwrap();
        let back = Codec::load(&path).unwrap();
        assert_eq!(back.params, c.params);
        assert_eq!(back.arch(), c.arch());
        assert_eq!(back.model_id(), 2);
    }

    #[test]
    fn block_loss_matches_components() {
        let pc = PointCloud::from_voxels(vec![[0, 0, 0], [1, 2, 3]], None).unwrap();
        let b = VoxelBlock::from_cloud_region(&pc, [0; 3], 8, 1);
        let mut d = b.clone();
        d.data.iter_mut().for_each(|v| *v = 0.5);
        let cfg = TrainConfig::default();
        let focal = crate::nn::focal_loss(b.geometry(), d.geometry(), 0.7, 2.0).unwrap();
        let l = block_rd_loss(&b, &d, 10.0, &cfg).unwrap();
        assert!((l - (focal + 0.001 * 5.0)).abs() < 1e-12);
    }
}
