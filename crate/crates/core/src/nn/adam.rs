// SPDX-License-Identifier: Apache-2.0

use super::tensor::{Real, Tensor};

/// Adam optimizer state with bias-corrected moments.
#[derive(Debug, Clone)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// Applies one update to `params` given matching `grads`.
    pub fn step<T: Real>(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) {
        assert_eq!(params.len(), grads.len(), "one gradient per parameter");
        if self.m.is_empty() {
            self.m = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.v = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (k, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[k], &mut self.v[k]);
            for j in 0..p.len() {
                let gj = g.data[j].f64();
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * gj;
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * gj * gj;
                let mh = m[j] / c1;
                let vh = v[j] / c2;
                p.data[j] -= T::of(self.lr * mh / (vh.sqrt() + self.eps));
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_is_noop() {
        let mut p = vec![Tensor::<f64>::filled([1, 1, 1, 1, 2], 3.0)];
        let g = vec![Tensor::<f64>::zeros([1, 1, 1, 1, 2])];
        let mut opt = Adam::new(1e-4);
        opt.step(&mut p, &g);
        assert_eq!(p[0].data, vec![3.0, 3.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        for &g0 in &[2.5, -0.01] {
            let mut p = vec![Tensor::<f64>::scalar(1.0)];
            let mut opt = Adam::new(1e-4);
            opt.step(&mut p, &[Tensor::scalar(g0)]);
            // m̂ = g, v̂ = g² ⇒ Δ = -lr·g/(|g| + ε)
            let expect = 1.0 - 1e-4 * g0 / (g0.abs() + 1e-8);
            assert!((p[0].data[0] - expect).abs() < 1e-15);
        }
    }

    #[test]
    fn descends_quadratic() {
        let mut p = vec![Tensor::<f64>::scalar(1.0)];
        let mut opt = Adam::new(0.1);
        for _ in 0..2 {
            let x = p[0].data[0];
            opt.step(&mut p, &[Tensor::scalar(2.0 * x)]);
        }
        assert!(p[0].data[0].powi(2) < 1.0);
    }
}
