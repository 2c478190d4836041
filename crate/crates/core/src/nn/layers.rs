// SPDX-License-Identifier: Apache-2.0

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::graph::{Graph, Var};
use super::tensor::{Real, Tensor};

/// Named trainable tensors of a network, in registration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor<T>>,
}

impl<T: Real> Default for ParamSet<T> {
    fn default() -> Self {
        ParamSet {
            names: Vec::new(),
            tensors: Vec::new(),
        }
    }
}

impl<T: Real> ParamSet<T> {
    pub fn add(&mut self, name: impl Into<String>, t: Tensor<T>) -> usize {
        self.names.push(name.into());
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn count(&self) -> usize {
        self.tensors.iter().map(|t| t.len()).sum()
    }

    /// Places every parameter on the tape; `trainable` controls whether
    /// gradients are tracked.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> Vec<Var> {
        self.tensors
            .iter()
            .map(|t| {
                if trainable {
                    g.param(t.clone())
                } else {
                    g.constant(t.clone())
                }
            })
            .collect()
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            names: self.names.clone(),
            tensors: self.tensors.iter().map(|t| t.cast()).collect(),
        }
    }
}

/// Kernel, stride and channel layout of one convolution layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub transposed: bool,
}

impl ConvSpec {
    pub fn new(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        ConvSpec {
            in_channels,
            out_channels,
            kernel,
            stride,
            transposed: false,
        }
    }

    pub fn transposed(in_channels: usize, out_channels: usize, kernel: usize, stride: usize) -> Self {
        ConvSpec {
            transposed: true,
            ..Self::new(in_channels, out_channels, kernel, stride)
        }
    }

    /// Spatial size of the output for an input of size `n`.
    pub fn out_size(&self, n: usize) -> usize {
        if self.transposed {
            n * self.stride
        } else {
            n.div_ceil(self.stride)
        }
    }

    fn weight_shape(&self) -> [usize; 5] {
        let k = self.kernel;
        if self.transposed {
            [self.in_channels, self.out_channels, k, k, k]
        } else {
            [self.out_channels, self.in_channels, k, k, k]
        }
    }
}

#[derive(Debug, Clone)]
pub struct Conv3d {
    pub spec: ConvSpec,
    w: usize,
    b: usize,
}

impl Conv3d {
    /// Registers He-initialized weights and zero biases.
    pub fn new<T: Real>(ps: &mut ParamSet<T>, name: &str, spec: ConvSpec, rng: &mut impl Rng) -> Self {
        assert!(matches!(spec.kernel, 1 | 3 | 5), "kernel must be 1, 3 or 5");
        assert!(matches!(spec.stride, 1 | 2), "stride must be 1 or 2");
        let shape = spec.weight_shape();
        let fan_in = spec.in_channels * spec.kernel.pow(3);
        let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).unwrap();
        let data = (0..shape.iter().product::<usize>())
            .map(|_| T::of(normal.sample(rng)))
            .collect();
        let w = ps.add(format!("{name}.w"), Tensor { shape, data });
        let b = ps.add(
            format!("{name}.b"),
            Tensor::zeros([1, spec.out_channels, 1, 1, 1]),
        );
        Conv3d { spec, w, b }
    }

    pub fn weight_index(&self) -> usize {
        self.w
    }

    pub fn bias_index(&self) -> usize {
        self.b
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, pv: &[Var], x: Var) -> Var {
        if self.spec.transposed {
            g.conv_transposed(x, pv[self.w], pv[self.b], self.spec.stride)
        } else {
            g.conv(x, pv[self.w], pv[self.b], self.spec.stride)
        }
    }
}

/// Inception-residual block: parallel ReLU convolutions with different
/// kernel sizes, concatenated, fused by a 1³ convolution and added to the
/// input.
#[derive(Debug, Clone)]
pub struct Irb {
    pub channels: usize,
    branches: Vec<Conv3d>,
    fuse: Conv3d,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IrbSpec {
    pub channels: usize,
    pub kernels: Vec<usize>,
}

impl IrbSpec {
    /// Branch kernels of the coding network.
    pub fn codec(channels: usize) -> Self {
        IrbSpec {
            channels,
            kernels: vec![1, 3, 5],
        }
    }

    /// Lighter branches of the up-sampling network.
    pub fn light(channels: usize) -> Self {
        IrbSpec {
            channels,
            kernels: vec![1, 3],
        }
    }
}

impl Irb {
    pub fn new<T: Real>(ps: &mut ParamSet<T>, name: &str, spec: &IrbSpec, rng: &mut impl Rng) -> Self {
        let c = spec.channels;
        let half = (c / 2).max(1);
        let branches: Vec<Conv3d> = spec
            .kernels
            .iter()
            .map(|&k| Conv3d::new(ps, &format!("{name}.k{k}"), ConvSpec::new(c, half, k, 1), rng))
            .collect();
        let fuse = Conv3d::new(
            ps,
            &format!("{name}.fuse"),
            ConvSpec::new(half * branches.len(), c, 1, 1),
            rng,
        );
        Irb {
            channels: c,
            branches,
            fuse,
        }
    }

    pub fn forward<T: Real>(&self, g: &mut Graph<T>, pv: &[Var], x: Var) -> Var {
        let outs: Vec<Var> = self
            .branches
            .iter()
            .map(|b| {
                let y = b.forward(g, pv, x);
                g.relu(y)
            })
            .collect();
        let cat = g.concat(&outs);
        let f = self.fuse.forward(g, pv, cat);
        g.add(x, f)
    }

    pub fn param_indices(&self) -> Vec<usize> {
        self.branches
            .iter()
            .chain(std::iter::once(&self.fuse))
            .flat_map(|c| [c.weight_index(), c.bias_index()])
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_gradients;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn input(ps: &mut ParamSet<f64>, shape: [usize; 5]) -> usize {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let n = shape.iter().product();
        ps.add("x", Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap())
    }

    fn project(g: &mut Graph<f64>, v: Var) -> Var {
        // squaring keeps the functional non-linear in the layer output
        let sq = g.mul(v, v);
        g.mean(sq)
    }

    #[test]
    fn conv3d_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut ps = ParamSet::default();
        let conv = Conv3d::new(&mut ps, "c", ConvSpec::new(2, 3, 5, 2), &mut rng);
        let up = Conv3d::new(&mut ps, "u", ConvSpec::transposed(3, 2, 3, 2), &mut rng);
        // non-zero biases so their gradients are exercised away from 0
        for i in [conv.bias_index(), up.bias_index()] {
            ps.tensors[i].data.iter_mut().for_each(|b| *b = 0.1);
        }
        let xi = input(&mut ps, [1, 2, 4, 4, 4]);
        let r = check_gradients(&ps, Some(300), 2, |g, pv| {
            let y = conv.forward(g, pv, pv[xi]);
            let y = up.forward(g, pv, y);
            project(g, y)
        });
        assert!(r.max_rel_error < 1e-6, "{r:?}");
    }

    #[test]
    fn irb_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut ps = ParamSet::default();
        let irb = Irb::new(&mut ps, "irb", &IrbSpec::codec(4), &mut rng);
        let xi = input(&mut ps, [1, 4, 3, 3, 3]);
        let r = check_gradients(&ps, Some(300), 3, |g, pv| {
            let y = irb.forward(g, pv, pv[xi]);
            project(g, y)
        });
        assert!(r.max_rel_error < 1e-6, "{r:?}");
        assert_eq!(irb.param_indices().len(), 8);
    }
}
