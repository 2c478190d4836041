// SPDX-License-Identifier: Apache-2.0

//! Finite-difference verification of tape gradients.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Graph, ParamSet, Var};

/// Gradient magnitudes below this are compared absolutely rather than
/// relatively.
pub const GRAD_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheck {
    pub max_rel_error: f64,
    pub checked: usize,
}

fn eval(params: &ParamSet<f64>, f: &impl Fn(&mut Graph<f64>, &[Var]) -> Var) -> f64 {
    let mut g = Graph::new();
    let pv = params.bind(&mut g, false);
    let out = f(&mut g, &pv);
    g.value(out).sum()
}

/// Compares the tape gradient of the scalar `f` with central differences
/// at `samples` randomly chosen parameter entries (all entries when
/// `None`). The error of an entry is `|a − n| / max(|a|, |n|, GRAD_FLOOR)`.
pub fn check_gradients(
    params: &ParamSet<f64>,
    samples: Option<usize>,
    seed: u64,
    f: impl Fn(&mut Graph<f64>, &[Var]) -> Var,
) -> GradCheck {
    let mut g = Graph::new();
    let pv = params.bind(&mut g, true);
    let out = f(&mut g, &pv);
    g.backward(out);
    let analytic: Vec<Vec<f64>> = pv
        .iter()
        .zip(&params.tensors)
        .map(|(&v, t)| g.grad(v).map(|d| d.data.clone()).unwrap_or_else(|| vec![0.0; t.len()]))
        .collect();

    let coords: Vec<(usize, usize)> = params
        .tensors
        .iter()
        .enumerate()
        .flat_map(|(ti, t)| (0..t.len()).map(move |i| (ti, i)))
        .collect();
    let picked: Vec<(usize, usize)> = match samples {
        Some(n) if n < coords.len() => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample(&mut rng, coords.len(), n).into_iter().map(|i| coords[i]).collect()
        }
        _ => coords,
    };

    let mut worst = 0.0f64;
    let mut p = params.clone();
    for &(ti, i) in &picked {
        let x0 = params.tensors[ti].data[i];
        let h = 1e-6 * x0.abs().max(1.0);
        p.tensors[ti].data[i] = x0 + h;
        let up = eval(&p, &f);
        p.tensors[ti].data[i] = x0 - h;
        let down = eval(&p, &f);
        p.tensors[ti].data[i] = x0;
        let numeric = (up - down) / (2.0 * h);
        let a = analytic[ti][i];
        let err = (a - numeric).abs() / a.abs().max(numeric.abs()).max(GRAD_FLOOR);
        worst = worst.max(err);
    }
    GradCheck {
        max_rel_error: worst,
        checked: picked.len(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::Tensor;

    #[test]
    fn quadratic_is_exact() {
        let mut ps = ParamSet::default();
        ps.add("x", Tensor::from_vec([1, 1, 1, 1, 3], vec![0.3, -1.2, 2.0]).unwrap());
        let r = check_gradients(&ps, None, 0, |g, pv| {
            let sq = g.mul(pv[0], pv[0]);
            g.mean(sq)
        });
        assert_eq!(r.checked, 3);
        assert!(r.max_rel_error < 1e-8, "{r:?}");
        let sub = check_gradients(&ps, Some(2), 4, |g, pv| {
            let sq = g.mul(pv[0], pv[0]);
            g.mean(sq)
        });
        assert_eq!(sub.checked, 2);
    }
}
