// SPDX-License-Identifier: Apache-2.0

//! Minibatch training loop shared by the codec and the up-sampling network.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{Adam, Graph, ParamSet, Tensor, Var};
use crate::{Error, Result};

/// Noise seed of every loss evaluation, so that two evaluations of the same
/// weights agree and validation losses are comparable across epochs.
const EVAL_SEED: u64 = 0x5eed_e7a1;

#[derive(Debug, Clone, PartialEq)]
pub struct FitOptions {
    pub learning_rate: f64,
    pub batch: usize,
    pub patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FitReport {
    /// Training-set loss of the starting weights.
    pub initial_loss: f64,
    /// Training-set loss of the returned (best-validation) weights.
    pub final_loss: f64,
    pub val_loss: Vec<f64>,
    pub best_epoch: usize,
    pub stopped_early: bool,
}

impl FitReport {
    pub fn epochs(&self) -> usize {
        self.val_loss.len()
    }
}

/// Batch loss builder: places the scalar mean loss of `items` on the tape.
pub trait LossFn<B>: Fn(&mut Graph<f32>, &[Var], &[&B], &mut ChaCha8Rng) -> Result<Var> {}
impl<B, F: Fn(&mut Graph<f32>, &[Var], &[&B], &mut ChaCha8Rng) -> Result<Var>> LossFn<B> for F {}

/// Mean per-item loss over `items` with fixed-seed noise.
pub fn evaluate<B>(params: &ParamSet<f32>, items: &[B], batch: usize, loss: &impl LossFn<B>) -> Result<f64> {
    if items.is_empty() {
        return Err(Error::arg("nothing to evaluate"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(EVAL_SEED);
    let mut total = 0.0;
    for chunk in items.chunks(batch.max(1)) {
        let mut g = Graph::new();
        let pv = params.bind(&mut g, false);
        let refs: Vec<&B> = chunk.iter().collect();
        let l = loss(&mut g, &pv, &refs, &mut rng)?;
        total += g.value(l).data[0] as f64 * chunk.len() as f64;
    }
    Ok(total / items.len() as f64)
}

/// Adam over seeded shuffled epochs; stops once the validation loss has
/// not improved for `patience` epochs (the training set stands in for an
/// empty `val`) and leaves the best-validation weights in `params`.
pub fn fit<B>(params: &mut ParamSet<f32>, train: &[B], val: &[B], opts: &FitOptions, loss: impl LossFn<B>) -> Result<FitReport> {
    if train.is_empty() {
        return Err(Error::arg("empty training set"));
    }
    if opts.batch == 0 {
        return Err(Error::arg("batch size must be positive"));
    }
    let val = if val.is_empty() { train } else { val };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed.wrapping_add(1));
    let mut adam = Adam::new(opts.learning_rate);
    let initial_loss = evaluate(params, train, opts.batch, &loss)?;

    let mut best = (f64::INFINITY, params.clone(), 0);
    let mut val_loss = Vec::new();
    let mut stale = 0;
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train.len()).collect();
    for epoch in 0..opts.max_epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(opts.batch) {
            let mut g = Graph::new();
            let pv = params.bind(&mut g, true);
            let refs: Vec<&B> = chunk.iter().map(|&i| &train[i]).collect();
            let l = loss(&mut g, &pv, &refs, &mut rng)?;
            g.backward(l);
            let grads: Vec<Tensor<f32>> = pv
                .iter()
                .zip(&params.tensors)
                .map(|(&v, t)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(t.shape)))
                .collect();
            adam.step(&mut params.tensors, &grads);
        }
        let v = evaluate(params, val, opts.batch, &loss)?;
        val_loss.push(v);
        if v < best.0 {
            best = (v, params.clone(), epoch);
            stale = 0;
        } else {
            stale += 1;
            if stale >= opts.patience {
                stopped_early = true;
                break;
            }
        }
    }
    *params = best.1;
    let final_loss = evaluate(params, train, opts.batch, &loss)?;
    Ok(FitReport {
        initial_loss,
        final_loss,
        val_loss,
        best_epoch: best.2,
        stopped_early,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    // fits y = w·x on a handful of scalar samples
    fn line_loss(g: &mut Graph<f32>, pv: &[Var], items: &[&(f32, f32)], _: &mut ChaCha8Rng) -> Result<Var> {
        let mut terms = Vec::new();
        for &&(x, y) in items {
            let xs = g.scale(pv[0], x);
            let d = g.add_scalar(xs, -y);
            terms.push(g.mul(d, d));
        }
        let cat = g.concat(&terms);
        Ok(g.mean(cat))
    }

    fn params() -> ParamSet<f32> {
        let mut ps = ParamSet::default();
        ps.add("w", Tensor::scalar(0.0));
        ps
    }

    #[test]
    fn descends_and_keeps_best() {
        let data = [(1.0, 2.0), (2.0, 4.0), (-1.0, -2.0), (0.5, 1.0)];
        let mut ps = params();
        let opts = FitOptions {
            learning_rate: 0.05,
            batch: 2,
            patience: 5,
            max_epochs: 200,
            seed: 3,
        };
        let r = fit(&mut ps, &data, &[], &opts, line_loss).unwrap();
        assert!(r.final_loss < 1e-3 * r.initial_loss);
        assert!((ps.tensors[0].data[0] - 2.0).abs() < 0.05);
        assert_eq!(r.final_loss, *r.val_loss.iter().min_by(|a, b| a.total_cmp(b)).unwrap());
    }

    #[test]
    fn frozen_weights_stop_after_patience() {
        let data = [(1.0, 2.0)];
        let mut ps = params();
        let opts = FitOptions {
            learning_rate: 0.0,
            batch: 1,
            patience: 5,
            max_epochs: 100,
            seed: 0,
        };
        let r = fit(&mut ps, &data, &[], &opts, line_loss).unwrap();
        assert!(r.stopped_early);
        assert_eq!(r.epochs(), 6);
    }

    #[test]
    fn empty_training_set_is_an_error() {
        let opts = FitOptions {
            learning_rate: 0.1,
            batch: 1,
            patience: 1,
            max_epochs: 1,
            seed: 0,
        };
        assert!(fit(&mut params(), &[] as &[(f32, f32)], &[], &opts, line_loss).is_err());
    }
}
