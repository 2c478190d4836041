// SPDX-License-Identifier: Apache-2.0

//! Reverse-mode differentiation tape.
//!
//! Every operation appends a node holding its value; [`Graph::backward`]
//! walks the tape in reverse and accumulates gradients for the nodes that
//! depend on a parameter.

use super::conv;
use super::likelihood;
use super::loss::{focal_grad, focal_term};
use super::tensor::{Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Op<T> {
    Leaf,
    Conv {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        transposed: bool,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Concat(Vec<Var>),
    Slice { x: Var, start: usize },
    Mean(Var),
    Focal { v: Var, target: Tensor<T>, alpha: f64, gamma: f64 },
    ColorMse { v: Var, target: Tensor<T> },
    GaussianBits { y: Var, mu: Var, sigma: Var },
    LogisticBits { z: Var, loc: Var, log_scale: Var },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn take_value(&mut self, v: Var) -> Tensor<T> {
        std::mem::replace(&mut self.nodes[v.0].value, Tensor::zeros([0, 0, 0, 0, 0]))
    }

    /// A constant input; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn conv(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        let y = conv::forward(self.value(x), self.value(w), Some(self.value(b)), stride);
        let tracked = self.tracked(x) || self.tracked(w) || self.tracked(b);
        self.push(
            y,
            Op::Conv {
                x,
                w,
                b,
                stride,
                transposed: false,
            },
            tracked,
        )
    }

    pub fn conv_transposed(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Var {
        let xs = self.value(x).spatial();
        let out = [xs[0] * stride, xs[1] * stride, xs[2] * stride];
        let mut y = conv::adjoint(self.value(x), self.value(w), stride, out);
        conv::add_bias(&mut y, self.value(b));
        let tracked = self.tracked(x) || self.tracked(w) || self.tracked(b);
        self.push(
            y,
            Op::Conv {
                x,
                w,
                b,
                stride,
                transposed: true,
            },
            tracked,
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut y = self.value(a).clone();
        assert_eq!(y.shape, self.value(b).shape, "add shapes");
        y.add_assign(self.value(b));
        let t = self.tracked(a) || self.tracked(b);
        self.push(y, Op::Add(a, b), t)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape, vb.shape, "mul shapes");
        let y = Tensor {
            shape: va.shape,
            data: va.data.iter().zip(&vb.data).map(|(&p, &q)| p * q).collect(),
        };
        let t = self.tracked(a) || self.tracked(b);
        self.push(y, Op::Mul(a, b), t)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let y = self.value(a).map(|v| v * s);
        let t = self.tracked(a);
        self.push(y, Op::Scale(a, s), t)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Var {
        let y = self.value(a).map(|v| v + s);
        let t = self.tracked(a);
        self.push(y, Op::AddScalar(a), t)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let y = self.value(a).map(|v| v.max(T::zero()));
        let t = self.tracked(a);
        self.push(y, Op::Relu(a), t)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let y = self.value(a).map(sigmoid);
        let t = self.tracked(a);
        self.push(y, Op::Sigmoid(a), t)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let y = self.value(a).map(softplus);
        let t = self.tracked(a);
        self.push(y, Op::Softplus(a), t)
    }

    /// Concatenation along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let first = self.value(parts[0]).shape;
        let channels: usize = parts.iter().map(|&p| self.value(p).channels()).sum();
        let mut shape = first;
        shape[1] = channels;
        let s = self.value(parts[0]).spatial_len();
        let mut data = Vec::with_capacity(shape.iter().product());
        for n in 0..first[0] {
            for &p in parts {
                let v = self.value(p);
                assert_eq!(
                    (v.shape[0], &v.shape[2..]),
                    (first[0], &first[2..]),
                    "concat shapes"
                );
                let c = v.channels();
                data.extend_from_slice(&v.data[n * c * s..(n + 1) * c * s]);
            }
        }
        let t = parts.iter().any(|&p| self.tracked(p));
        self.push(Tensor { shape, data }, Op::Concat(parts.to_vec()), t)
    }

    /// Channels `start..start + len`.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let v = self.value(x);
        let [n, c, d, h, w] = v.shape;
        assert!(start + len <= c, "slice out of range");
        let s = d * h * w;
        let mut data = Vec::with_capacity(n * len * s);
        for ni in 0..n {
            data.extend_from_slice(&v.data[(ni * c + start) * s..(ni * c + start + len) * s]);
        }
        let t = self.tracked(x);
        self.push(
            Tensor {
                shape: [n, len, d, h, w],
                data,
            },
            Op::Slice { x, start },
            t,
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let m = v.sum() / T::of(v.len() as f64);
        let t = self.tracked(a);
        self.push(Tensor::scalar(m), Op::Mean(a), t)
    }

    /// Per-sample mean focal loss of probabilities `v` against binary
    /// targets; output shape `[n, 1, 1, 1, 1]`.
    pub fn focal(&mut self, v: Var, target: Tensor<T>, alpha: f64, gamma: f64) -> Var {
        let val = self.value(v);
        assert_eq!(val.shape, target.shape, "focal shapes");
        let n = val.batch();
        let per = val.len() / n;
        let mut out = Tensor::zeros([n, 1, 1, 1, 1]);
        for ni in 0..n {
            let s: f64 = val
                .sample(ni)
                .iter()
                .zip(target.sample(ni))
                .map(|(&p, &u)| focal_term(p.f64(), u.f64() >= 0.5, alpha, gamma))
                .sum();
            out.data[ni] = T::of(s / per as f64);
        }
        let t = self.tracked(v);
        self.push(out, Op::Focal { v, target, alpha, gamma }, t)
    }

    /// Per-sample colour error: `v` holds 3 colour channels, `target` the
    /// 4-channel source block whose geometry channel marks occupied voxels.
    pub fn color_mse(&mut self, v: Var, target: Tensor<T>) -> Var {
        let val = self.value(v);
        let [n, c, ..] = val.shape;
        assert_eq!(c, 3, "colour prediction has 3 channels");
        assert_eq!(target.channels(), 4, "colour target has 4 channels");
        let mut out = Tensor::zeros([n, 1, 1, 1, 1]);
        for ni in 0..n {
            let occ = target.plane(ni, 0);
            let count = occ.iter().filter(|&&u| u.f64() >= 0.5).count();
            if count == 0 {
                continue;
            }
            let mut acc = 0.0;
            for ch in 0..3 {
                let pv = val.plane(ni, ch);
                let tv = target.plane(ni, ch + 1);
                for j in 0..occ.len() {
                    if occ[j].f64() >= 0.5 {
                        let d = (pv[j] - tv[j]).f64();
                        acc += d * d;
                    }
                }
            }
            out.data[ni] = T::of(acc / 3.0 / count as f64);
        }
        let t = self.tracked(v);
        self.push(out, Op::ColorMse { v, target }, t)
    }

    /// Per-sample bits `-Σ log2 P(y)` under discretized Gaussians.
    pub fn gaussian_bits(&mut self, y: Var, mu: Var, sigma: Var) -> Var {
        let (vy, vm, vs) = (self.value(y), self.value(mu), self.value(sigma));
        assert!(vy.shape == vm.shape && vy.shape == vs.shape, "gaussian bits shapes");
        let n = vy.batch();
        let per = vy.len() / n;
        let mut out = Tensor::zeros([n, 1, 1, 1, 1]);
        for ni in 0..n {
            let r = ni * per..(ni + 1) * per;
            let s: f64 = vy.data[r.clone()]
                .iter()
                .zip(&vm.data[r.clone()])
                .zip(&vs.data[r])
                .map(|((&a, &m), &s)| likelihood::bits(likelihood::gaussian(a.f64(), m.f64(), s.f64())))
                .sum();
            out.data[ni] = T::of(s);
        }
        let t = self.tracked(y) || self.tracked(mu) || self.tracked(sigma);
        self.push(out, Op::GaussianBits { y, mu, sigma }, t)
    }

    /// Per-sample bits of `z` under per-channel discretized logistics with
    /// parameters of shape `[1, c, 1, 1, 1]`.
    pub fn logistic_bits(&mut self, z: Var, loc: Var, log_scale: Var) -> Var {
        let (vz, vl, vs) = (self.value(z), self.value(loc), self.value(log_scale));
        let [n, c, ..] = vz.shape;
        assert!(vl.shape == [1, c, 1, 1, 1] && vs.shape == [1, c, 1, 1, 1], "logistic params");
        let mut out = Tensor::zeros([n, 1, 1, 1, 1]);
        for ni in 0..n {
            let mut s = 0.0;
            for ch in 0..c {
                let (m, ls) = (vl.data[ch].f64(), vs.data[ch].f64());
                for &v in vz.plane(ni, ch) {
                    s += likelihood::bits(likelihood::logistic(v.f64(), m, ls.exp()));
                }
            }
            out.data[ni] = T::of(s);
        }
        let t = self.tracked(z) || self.tracked(loc) || self.tracked(log_scale);
        self.push(out, Op::LogisticBits { z, loc, log_scale }, t)
    }

    /// Back-propagates from scalar `out`; afterwards [`Graph::grad`] returns
    /// d out / d v for every tracked node.
    pub fn backward(&mut self, out: Var) {
        assert_eq!(self.value(out).len(), 1, "backward from a scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[out.0] = Some(Tensor::filled(self.value(out).shape, T::one()));
        for idx in (0..=out.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].tracked {
                continue;
            }
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        self.grads = grads;
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, t: Tensor<T>| {
            if !self.nodes[v.0].tracked {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let elementwise = |a: Var, f: &dyn Fn(T, T, T) -> T| -> Tensor<T> {
            let x = &self.nodes[a.0].value;
            Tensor {
                shape: x.shape,
                data: x
                    .data
                    .iter()
                    .zip(&node.value.data)
                    .zip(&g.data)
                    .map(|((&xi, &yi), &gi)| f(xi, yi, gi))
                    .collect(),
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::Conv {
                x,
                w,
                b,
                stride,
                transposed,
            } => {
                let xv = self.value(x);
                let wv = self.value(w);
                if self.tracked(x) {
                    let dx = if transposed {
                        conv::forward(g, wv, None, stride)
                    } else {
                        conv::adjoint(g, wv, stride, xv.spatial())
                    };
                    acc(x, dx);
                }
                if self.tracked(w) {
                    let k = wv.shape[2];
                    let dw = if transposed {
                        conv::weight_grad(g, xv, k, stride)
                    } else {
                        conv::weight_grad(xv, g, k, stride)
                    };
                    acc(w, dw);
                }
                if self.tracked(b) {
                    acc(b, conv::bias_grad(g));
                }
            }
            &Op::Add(a, b) => {
                acc(a, g.clone());
                acc(b, g.clone());
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (self.value(a), self.value(b));
                let prod = |o: &Tensor<T>| Tensor {
                    shape: g.shape,
                    data: g.data.iter().zip(&o.data).map(|(&p, &q)| p * q).collect(),
                };
                acc(a, prod(vb));
                acc(b, prod(va));
            }
            &Op::Scale(a, s) => acc(a, g.map(|v| v * s)),
            &Op::AddScalar(a) => acc(a, g.clone()),
            &Op::Relu(a) => acc(
                a,
                elementwise(a, &|x, _, gi| if x > T::zero() { gi } else { T::zero() }),
            ),
            &Op::Sigmoid(a) => acc(a, elementwise(a, &|_, y, gi| gi * y * (T::one() - y))),
            &Op::Softplus(a) => acc(a, elementwise(a, &|x, _, gi| gi * sigmoid(x))),
            Op::Concat(parts) => {
                let n = g.batch();
                let s = g.spatial_len();
                let total = g.channels();
                let mut off = 0;
                for &p in parts {
                    let shape = self.value(p).shape;
                    let c = shape[1];
                    let mut data = Vec::with_capacity(n * c * s);
                    for ni in 0..n {
                        data.extend_from_slice(&g.data[(ni * total + off) * s..(ni * total + off + c) * s]);
                    }
                    acc(p, Tensor { shape, data });
                    off += c;
                }
            }
            &Op::Slice { x, start } => {
                let shape = self.value(x).shape;
                let mut dx = Tensor::zeros(shape);
                let [n, c, ..] = shape;
                let len = g.channels();
                let s = g.spatial_len();
                for ni in 0..n {
                    dx.data[(ni * c + start) * s..(ni * c + start + len) * s]
                        .copy_from_slice(&g.data[ni * len * s..(ni + 1) * len * s]);
                }
                acc(x, dx);
            }
            &Op::Mean(a) => {
                let shape = self.value(a).shape;
                let n = shape.iter().product::<usize>();
                acc(a, Tensor::filled(shape, g.data[0] / T::of(n as f64)));
            }
            Op::Focal {
                v,
                target,
                alpha,
                gamma,
            } => {
                let val = self.value(*v);
                let n = val.batch();
                let per = val.len() / n;
                let mut dv = Tensor::zeros(val.shape);
                for ni in 0..n {
                    let scale = g.data[ni].f64() / per as f64;
                    for j in ni * per..(ni + 1) * per {
                        let d = focal_grad(val.data[j].f64(), target.data[j].f64() >= 0.5, *alpha, *gamma);
                        dv.data[j] = T::of(d * scale);
                    }
                }
                acc(*v, dv);
            }
            Op::ColorMse { v, target } => {
                let val = self.value(*v);
                let mut dv = Tensor::zeros(val.shape);
                for ni in 0..val.batch() {
                    let occ = target.plane(ni, 0);
                    let count = occ.iter().filter(|&&u| u.f64() >= 0.5).count();
                    if count == 0 {
                        continue;
                    }
                    let scale = g.data[ni].f64() * 2.0 / 3.0 / count as f64;
                    let s = val.spatial_len();
                    for ch in 0..3 {
                        let tv = target.plane(ni, ch + 1);
                        let base = (ni * 3 + ch) * s;
                        for j in 0..s {
                            if occ[j].f64() >= 0.5 {
                                let d = (val.data[base + j] - tv[j]).f64();
                                dv.data[base + j] = T::of(d * scale);
                            }
                        }
                    }
                }
                acc(*v, dv);
            }
            &Op::GaussianBits { y, mu, sigma } => {
                let (vy, vm, vs) = (self.value(y), self.value(mu), self.value(sigma));
                let per = vy.len() / vy.batch();
                let mut dy = Tensor::zeros(vy.shape);
                let mut dm = Tensor::zeros(vy.shape);
                let mut ds = Tensor::zeros(vy.shape);
                for j in 0..vy.len() {
                    let gs = g.data[j / per].f64();
                    let (by, bs) = likelihood::gaussian_bits_grad(vy.data[j].f64(), vm.data[j].f64(), vs.data[j].f64());
                    dy.data[j] = T::of(gs * by);
                    dm.data[j] = T::of(-gs * by);
                    ds.data[j] = T::of(gs * bs);
                }
                acc(y, dy);
                acc(mu, dm);
                acc(sigma, ds);
            }
            &Op::LogisticBits { z, loc, log_scale } => {
                let (vz, vl, vs) = (self.value(z), self.value(loc), self.value(log_scale));
                let [n, c, ..] = vz.shape;
                let mut dz = Tensor::zeros(vz.shape);
                let mut dl = Tensor::zeros(vl.shape);
                let mut dls = Tensor::zeros(vs.shape);
                let s = vz.spatial_len();
                for ni in 0..n {
                    let gs = g.data[ni].f64();
                    for ch in 0..c {
                        let (m, ls) = (vl.data[ch].f64(), vs.data[ch].f64());
                        let (mut sl, mut sls) = (0.0, 0.0);
                        for j in 0..s {
                            let idx = (ni * c + ch) * s + j;
                            let (bz, bls) = likelihood::logistic_bits_grad(vz.data[idx].f64(), m, ls);
                            dz.data[idx] = T::of(gs * bz);
                            sl -= gs * bz;
                            sls += gs * bls;
                        }
                        dl.data[ch] += T::of(sl);
                        dls.data[ch] += T::of(sls);
                    }
                }
                acc(z, dz);
                acc(loc, dl);
                acc(log_scale, dls);
            }
        }
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
pub fn softplus<T: Real>(x: T) -> T {
    // log(1 + e^x) without overflow
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::gradcheck::check_gradients;
    use crate::nn::ParamSet;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: [usize; 5], seed: u64, lo: f64, hi: f64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).unwrap()
    }

    // a random linear functional of `v`, so every output entry matters
    fn project(g: &mut Graph<f64>, v: Var, seed: u64) -> Var {
        let r = g.constant(random(g.value(v).shape, seed, -1.0, 1.0));
        let m = g.mul(v, r);
        g.mean(m)
    }

    fn params(shapes: &[[usize; 5]]) -> ParamSet<f64> {
        let mut ps = ParamSet::default();
        for (i, &s) in shapes.iter().enumerate() {
            ps.add(format!("p{i}"), random(s, 100 + i as u64, -1.5, 1.5));
        }
        ps
    }

    const TOL: f64 = 1e-6;

    #[test]
    fn elementwise_ops() {
        let ps = params(&[[2, 3, 2, 2, 2], [2, 3, 2, 2, 2]]);
        let r = check_gradients(&ps, None, 0, |g, pv| {
            let a = g.softplus(pv[0]);
            let b = g.sigmoid(pv[1]);
            let ab = g.mul(a, b);
            let c = g.relu(pv[0]);
            let c = g.scale(c, 0.3);
            let s = g.add(ab, c);
            let s = g.add_scalar(s, 2.0);
            let cat = g.concat(&[s, pv[1]]);
            let sl = g.slice(cat, 2, 3);
            project(g, sl, 1)
        });
        assert!(r.max_rel_error < TOL, "{r:?}");
    }

    #[test]
    fn convolutions() {
        for (transposed, stride) in [(false, 1), (false, 2), (true, 2)] {
            let w = if transposed { [3, 2, 3, 3, 3] } else { [2, 3, 3, 3, 3] };
            let ps = params(&[[1, 3, 4, 4, 4], w, [1, 2, 1, 1, 1]]);
            let r = check_gradients(&ps, Some(120), 3, |g, pv| {
                let y = if transposed {
                    g.conv_transposed(pv[0], pv[1], pv[2], stride)
                } else {
                    g.conv(pv[0], pv[1], pv[2], stride)
                };
                project(g, y, 2)
            });
            assert!(r.max_rel_error < TOL, "transposed={transposed} stride={stride}: {r:?}");
        }
    }

    #[test]
    fn focal_and_colour_losses() {
        let shape = [2, 1, 3, 3, 3];
        let target = random(shape, 7, 0.0, 1.0).map(|u| if u > 0.6 { 1.0 } else { 0.0 });
        let ps = params(&[shape]);
        let r = check_gradients(&ps, None, 0, |g, pv| {
            let p = g.sigmoid(pv[0]);
            let f = g.focal(p, target.clone(), 0.7, 2.0);
            project(g, f, 3)
        });
        assert!(r.max_rel_error < TOL, "focal {r:?}");

        let mut src = random([2, 4, 3, 3, 3], 8, 0.0, 1.0);
        for n in 0..2 {
            for j in 0..27 {
                let i = n * 4 * 27 + j;
                src.data[i] = if src.data[i] > 0.5 { 1.0 } else { 0.0 };
            }
        }
        let ps = params(&[[2, 3, 3, 3, 3]]);
        let r = check_gradients(&ps, None, 0, |g, pv| {
            let c = g.sigmoid(pv[0]);
            let e = g.color_mse(c, src.clone());
            project(g, e, 4)
        });
        assert!(r.max_rel_error < TOL, "colour {r:?}");
    }

    #[test]
    fn likelihood_ops() {
        let shape = [2, 2, 2, 2, 2];
        let ps = params(&[shape, shape, shape]);
        let r = check_gradients(&ps, None, 0, |g, pv| {
            let y = g.scale(pv[0], 3.0);
            let s = g.softplus(pv[2]);
            let s = g.add_scalar(s, 0.2);
            let b = g.gaussian_bits(y, pv[1], s);
            project(g, b, 5)
        });
        assert!(r.max_rel_error < TOL, "gaussian {r:?}");

        let ps = params(&[shape, [1, 2, 1, 1, 1], [1, 2, 1, 1, 1]]);
        let r = check_gradients(&ps, None, 0, |g, pv| {
            let z = g.scale(pv[0], 2.0);
            let b = g.logistic_bits(z, pv[1], pv[2]);
            project(g, b, 6)
        });
        assert!(r.max_rel_error < TOL, "logistic {r:?}");
    }
}
