// SPDX-License-Identifier: Apache-2.0

//! 3-D convolution kernels with zero "same" padding.
//!
//! A strided convolution maps spatial size `n` to `ceil(n / s)`; its adjoint
//! (the transposed convolution) maps `n` to `n * s`. Weights of a regular
//! convolution are laid out `[out, in, k, k, k]`; a transposed convolution
//! stores the weights of the forward convolution it is the adjoint of, i.e.
//! `[in, out, k, k, k]`.

use rayon::prelude::*;

use super::tensor::{Real, Tensor};

#[inline]
pub fn out_len(n: usize, stride: usize) -> usize {
    n.div_ceil(stride)
}

#[inline]
pub fn padding(k: usize) -> usize {
    (k - 1) / 2
}

/// Range of output positions `o` whose input tap `o * s + off - p` falls in
/// `[0, in_len)`.
#[inline]
fn valid(out_len: usize, in_len: usize, off: usize, s: usize, p: usize) -> (usize, usize) {
    let (off, s, p) = (off as i64, s as i64, p as i64);
    let lo = if p > off { (p - off + s - 1) / s } else { 0 };
    let hi = (in_len as i64 - 1 + p - off).div_euclid(s) + 1;
    let hi = hi.clamp(0, out_len as i64);
    (lo.min(hi) as usize, hi as usize)
}

/// Cross-correlation `y[n,o] = b[o] + Σ_i w[o,i] ⋆ x[n,i]`.
pub fn forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>, stride: usize) -> Tensor<T> {
    let [n, cin, d, h, wd] = x.shape;
    let [cout, wcin, k, _, _] = w.shape;
    assert_eq!(cin, wcin, "conv input channels");
    let p = padding(k);
    let (od, oh, ow) = (out_len(d, stride), out_len(h, stride), out_len(wd, stride));
    let plane = od * oh * ow;
    let mut y = Tensor::zeros([n, cout, od, oh, ow]);
    let k3 = k * k * k;
    y.data
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(no, out)| {
            let (ni, o) = (no / cout, no % cout);
            if let Some(b) = b {
                out.fill(b.data[o]);
            }
            for i in 0..cin {
                let xin = x.plane(ni, i);
                let wk = &w.data[(o * cin + i) * k3..(o * cin + i + 1) * k3];
                for kd in 0..k {
                    let (zl, zh) = valid(od, d, kd, stride, p);
                    for kh in 0..k {
                        let (yl, yh) = valid(oh, h, kh, stride, p);
                        for kw in 0..k {
                            let wv = wk[(kd * k + kh) * k + kw];
                            if wv == T::zero() {
                                continue;
                            }
                            let (xl, xh) = valid(ow, wd, kw, stride, p);
                            if xl >= xh {
                                continue;
                            }
                            for zo in zl..zh {
                                let zi = zo * stride + kd - p;
                                for yo in yl..yh {
                                    let yi = yo * stride + kh - p;
                                    let orow = &mut out[(zo * oh + yo) * ow..(zo * oh + yo + 1) * ow];
                                    let irow = &xin[(zi * h + yi) * wd..(zi * h + yi + 1) * wd];
                                    if stride == 1 {
                                        let ioff = xl + kw - p;
                                        for (a, &bv) in orow[xl..xh].iter_mut().zip(&irow[ioff..ioff + (xh - xl)]) {
                                            *a += wv * bv;
                                        }
                                    } else {
                                        for xo in xl..xh {
                                            orow[xo] += wv * irow[xo * stride + kw - p];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    y
}

/// Adjoint of [`forward`] with respect to its input: scatters `dy`
/// (shape `[n, out, ..]`) back onto an input grid of spatial size `in_dims`.
pub fn adjoint<T: Real>(dy: &Tensor<T>, w: &Tensor<T>, stride: usize, in_dims: [usize; 3]) -> Tensor<T> {
    let [n, cout, od, oh, ow] = dy.shape;
    let [wcout, cin, k, _, _] = w.shape;
    assert_eq!(cout, wcout, "conv adjoint channels");
    let p = padding(k);
    let [d, h, wd] = in_dims;
    let plane = d * h * wd;
    let k3 = k * k * k;
    let mut dx = Tensor::zeros([n, cin, d, h, wd]);
    dx.data
        .par_chunks_mut(plane)
        .enumerate()
        .for_each(|(ni_i, out)| {
            let (ni, i) = (ni_i / cin, ni_i % cin);
            for o in 0..cout {
                let g = dy.plane(ni, o);
                let wk = &w.data[(o * cin + i) * k3..(o * cin + i + 1) * k3];
                for kd in 0..k {
                    let (zl, zh) = valid(od, d, kd, stride, p);
                    for kh in 0..k {
                        let (yl, yh) = valid(oh, h, kh, stride, p);
                        for kw in 0..k {
                            let wv = wk[(kd * k + kh) * k + kw];
                            if wv == T::zero() {
                                continue;
                            }
                            let (xl, xh) = valid(ow, wd, kw, stride, p);
                            if xl >= xh {
                                continue;
                            }
                            for zo in zl..zh {
                                let zi = zo * stride + kd - p;
                                for yo in yl..yh {
                                    let yi = yo * stride + kh - p;
                                    let grow = &g[(zo * oh + yo) * ow..(zo * oh + yo + 1) * ow];
                                    let orow = &mut out[(zi * h + yi) * wd..(zi * h + yi + 1) * wd];
                                    if stride == 1 {
                                        let ioff = xl + kw - p;
                                        for (a, &gv) in orow[ioff..ioff + (xh - xl)].iter_mut().zip(&grow[xl..xh]) {
                                            *a += wv * gv;
                                        }
                                    } else {
                                        for xo in xl..xh {
                                            orow[xo * stride + kw - p] += wv * grow[xo];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        });
    dx
}

/// Gradient of [`forward`] with respect to its weights.
pub fn weight_grad<T: Real>(x: &Tensor<T>, dy: &Tensor<T>, k: usize, stride: usize) -> Tensor<T> {
    let [n, cin, d, h, wd] = x.shape;
    let [_, cout, od, oh, ow] = dy.shape;
    let p = padding(k);
    let k3 = k * k * k;
    let mut gw = Tensor::zeros([cout, cin, k, k, k]);
    gw.data
        .par_chunks_mut(cin * k3)
        .enumerate()
        .for_each(|(o, gwo)| {
            for i in 0..cin {
                for kd in 0..k {
                    let (zl, zh) = valid(od, d, kd, stride, p);
                    for kh in 0..k {
                        let (yl, yh) = valid(oh, h, kh, stride, p);
                        for kw in 0..k {
                            let (xl, xh) = valid(ow, wd, kw, stride, p);
                            let mut acc = T::zero();
                            for ni in 0..n {
                                let g = dy.plane(ni, o);
                                let xin = x.plane(ni, i);
                                for zo in zl..zh {
                                    let zi = zo * stride + kd - p;
                                    for yo in yl..yh {
                                        let yi = yo * stride + kh - p;
                                        let grow = &g[(zo * oh + yo) * ow..(zo * oh + yo + 1) * ow];
                                        let irow = &xin[(zi * h + yi) * wd..(zi * h + yi + 1) * wd];
                                        for xo in xl..xh {
                                            acc += grow[xo] * irow[xo * stride + kw - p];
                                        }
                                    }
                                }
                            }
                            gwo[(i * k + kd) * k * k + kh * k + kw] = acc;
                        }
                    }
                }
            }
        });
    gw
}

/// Bias gradient: per-channel sum of `dy`.
pub fn bias_grad<T: Real>(dy: &Tensor<T>) -> Tensor<T> {
    let c = dy.channels();
    let mut gb = Tensor::zeros([1, c, 1, 1, 1]);
    for ni in 0..dy.batch() {
        for o in 0..c {
            gb.data[o] += dy.plane(ni, o).iter().copied().sum::<T>();
        }
    }
    gb
}

pub fn add_bias<T: Real>(y: &mut Tensor<T>, b: &Tensor<T>) {
    let s = y.spatial_len();
    let c = y.channels();
    for (j, chunk) in y.data.chunks_mut(s).enumerate() {
        let bv = b.data[j % c];
        for v in chunk {
            *v += bv;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: [usize; 5]) -> Tensor<f64> {
        let n = shape.iter().product();
        Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Direct definition of the strided zero-padded cross-correlation.
    fn naive(x: &Tensor<f64>, w: &Tensor<f64>, s: usize) -> Tensor<f64> {
        let [n, cin, d, h, wd] = x.shape;
        let [cout, _, k, _, _] = w.shape;
        let p = padding(k) as i64;
        let (od, oh, ow) = (out_len(d, s), out_len(h, s), out_len(wd, s));
        let mut y = Tensor::zeros([n, cout, od, oh, ow]);
        for ni in 0..n {
            for o in 0..cout {
                for z in 0..od {
                    for yy in 0..oh {
                        for xx in 0..ow {
                            let mut acc = 0.0;
                            for i in 0..cin {
                                for a in 0..k {
                                    for b in 0..k {
                                        for c in 0..k {
                                            let zi = (z * s + a) as i64 - p;
                                            let yi = (yy * s + b) as i64 - p;
                                            let xi = (xx * s + c) as i64 - p;
                                            if zi < 0 || yi < 0 || xi < 0 || zi >= d as i64 || yi >= h as i64 || xi >= wd as i64 {
                                                continue;
                                            }
                                            let xv = x.data[(((ni * cin + i) * d + zi as usize) * h + yi as usize) * wd + xi as usize];
                                            acc += w.data[(((o * cin + i) * k + a) * k + b) * k + c] * xv;
                                        }
                                    }
                                }
                            }
                            y.data[(((ni * cout + o) * od + z) * oh + yy) * ow + xx] = acc;
                        }
                    }
                }
            }
        }
        y
    }

    #[test]
    fn forward_matches_naive() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, s, dims) in &[(1, 1, [3, 4, 5]), (3, 1, [4, 4, 4]), (3, 2, [5, 4, 6]), (5, 1, [6, 5, 4]), (1, 2, [4, 4, 3]), (5, 2, [7, 6, 5])] {
            let x = rand_tensor(&mut rng, [2, 3, dims[0], dims[1], dims[2]]);
            let w = rand_tensor(&mut rng, [4, 3, k, k, k]);
            let y = forward(&x, &w, None, s);
            let r = naive(&x, &w, s);
            assert_eq!(y.shape, r.shape);
            for (a, b) in y.data.iter().zip(&r.data) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn adjoint_identity() {
        // <forward(x), g> == <x, adjoint(g)> for every stride and kernel
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for &(k, s) in &[(1, 1), (3, 1), (3, 2), (5, 2), (1, 2)] {
            let x = rand_tensor(&mut rng, [2, 2, 5, 6, 4]);
            let w = rand_tensor(&mut rng, [3, 2, k, k, k]);
            let y = forward(&x, &w, None, s);
            let g = rand_tensor(&mut rng, y.shape);
            let lhs: f64 = y.data.iter().zip(&g.data).map(|(a, b)| a * b).sum();
            let dx = adjoint(&g, &w, s, x.spatial());
            let rhs: f64 = x.data.iter().zip(&dx.data).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0));
            // weight gradient is the adjoint w.r.t. w
            let gw = weight_grad(&x, &g, k, s);
            let rhs_w: f64 = w.data.iter().zip(&gw.data).map(|(a, b)| a * b).sum();
            assert!((lhs - rhs_w).abs() < 1e-10 * lhs.abs().max(1.0));
        }
    }

    #[test]
    fn shapes() {
        let x = Tensor::<f32>::zeros([1, 1, 9, 8, 7]);
        let w = Tensor::<f32>::zeros([2, 1, 3, 3, 3]);
        assert_eq!(forward(&x, &w, None, 2).shape, [1, 2, 5, 4, 4]);
        let up = adjoint(&Tensor::<f32>::zeros([1, 2, 4, 4, 4]), &w, 2, [8, 8, 8]);
        assert_eq!(up.shape, [1, 1, 8, 8, 8]);
    }

    #[test]
    fn identity_and_impulse() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(&mut rng, [1, 1, 4, 4, 4]);
        let w = Tensor::from_vec([1, 1, 1, 1, 1], vec![1.0]).unwrap();
        assert_eq!(forward(&x, &w, None, 1), x);
        let mut imp = Tensor::<f64>::zeros([1, 1, 7, 7, 7]);
        imp.data[(3 * 7 + 3) * 7 + 3] = 1.0;
        let w = rand_tensor(&mut rng, [1, 1, 3, 3, 3]);
        let y = forward(&imp, &w, None, 1);
        // correlation flips the kernel around the impulse
        for a in 0..3 {
            for b in 0..3 {
                for c in 0..3 {
                    let v = y.data[((4 - a) * 7 + (4 - b)) * 7 + (4 - c)];
                    assert_eq!(v, w.data[(a * 3 + b) * 3 + c]);
                }
            }
        }
    }
}
