//! Optimizer loop: Adam with linear warmup and cosine decay, optional global
//! gradient clipping, and per-item mask sampling. Every random draw is
//! derived from `(seed, counters)`, so a run resumed from a checkpoint
//! follows the uninterrupted trajectory exactly.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::config::{ModelConfig, OptimizerConfig};
use crate::datasets::SequenceSource;
use crate::error::{Error, Result};
use crate::masking::MaskSampler;
use crate::model::Futurist;
use crate::objective::LossBreakdown;
use crate::tensor::Scalar;

/// Model parameters plus everything needed to continue training.
#[derive(Clone, Debug)]
pub struct Checkpoint<T: Scalar> {
    pub model: Futurist<T>,
    pub adam_m: Vec<T>,
    pub adam_v: Vec<T>,
    /// Optimizer steps taken so far.
    pub step: u64,
    pub epoch: u64,
    /// Batches of `epoch` already consumed.
    pub batch_in_epoch: u64,
}

impl<T: Scalar> Checkpoint<T> {
    pub fn new(config: ModelConfig) -> Result<Self> {
        Ok(Checkpoint::from_model(Futurist::new(config)?))
    }

    pub fn from_model(model: Futurist<T>) -> Self {
        let n = model.num_params();
        Checkpoint {
            model,
            adam_m: vec![T::zero(); n],
            adam_v: vec![T::zero(); n],
            step: 0,
            epoch: 0,
            batch_in_epoch: 0,
        }
    }

    pub fn config(&self) -> &ModelConfig {
        self.model.config()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// Steps completed, counting this one.
    pub step: u64,
    pub epoch: u64,
    pub learning_rate: f64,
    /// Mean over the batch items.
    pub loss: LossBreakdown,
    /// Global gradient norm before clipping.
    pub grad_norm: f64,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOptions {
    /// Stop once this many total steps are done (the schedule still spans the full plan).
    pub stop_at: Option<u64>,
    /// Worker threads for per-item gradients; 0 or 1 runs inline.
    pub workers: usize,
}

pub fn batches_per_epoch(dataset_len: usize, batch_size: usize) -> u64 {
    dataset_len.div_ceil(batch_size.max(1)) as u64
}

/// Steps the schedule is planned over.
pub fn planned_steps(opt: &OptimizerConfig, dataset_len: usize) -> u64 {
    let steps = opt.epochs * batches_per_epoch(dataset_len, opt.batch_size);
    if opt.max_steps > 0 {
        steps.min(opt.max_steps)
    } else {
        steps
    }
}

/// Learning rate for the step with zero-based index `step`.
pub fn learning_rate(opt: &OptimizerConfig, step: u64, total: u64) -> f64 {
    let base = opt.learning_rate;
    if step < opt.warmup_steps {
        return base * (step + 1) as f64 / opt.warmup_steps as f64;
    }
    let span = total.saturating_sub(opt.warmup_steps).max(1) as f64;
    let progress = ((step - opt.warmup_steps) as f64 / span).min(1.0);
    base * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// SplitMix64 over a sequence of words.
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut z = 0x243F_6A88_85A3_08D3u64;
    for &p in parts {
        z ^= p;
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^= z >> 31;
    }
    z
}

const ORDER_TAG: u64 = 1;
const WINDOW_TAG: u64 = 2;
const MASK_TAG: u64 = 3;

/// Dataset indices in the order epoch `epoch` visits them.
pub fn epoch_order(seed: u64, epoch: u64, len: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..len).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, ORDER_TAG, epoch])));
    order
}

pub fn train<T: Scalar>(
    config: ModelConfig,
    data: &dyn SequenceSource,
    observer: &mut dyn FnMut(&StepReport),
) -> Result<Checkpoint<T>> {
    config.ensure_valid()?;
    run(Checkpoint::new(config)?, data, TrainOptions::default(), observer)
}

/// Continues `ckpt` until the planned step count (or `opts.stop_at`).
pub fn run<T: Scalar>(
    mut ckpt: Checkpoint<T>,
    data: &dyn SequenceSource,
    opts: TrainOptions,
    observer: &mut dyn FnMut(&StepReport),
) -> Result<Checkpoint<T>> {
    let cfg = ckpt.config().clone();
    cfg.ensure_valid()?;
    let opt = cfg.optimizer.clone();
    let total = planned_steps(&opt, data.len());
    if total > 0 && data.is_empty() {
        return Err(Error::Contract("training needs a non-empty dataset".into()));
    }
    let stop = opts.stop_at.map_or(total, |s| s.min(total));
    let per_epoch = batches_per_epoch(data.len(), opt.batch_size);
    let pool = if opts.workers > 1 {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(opts.workers)
                .build()
                .map_err(|e| Error::Contract(e.to_string()))?,
        )
    } else {
        None
    };
    let names: Vec<String> = cfg.modalities.iter().map(|m| m.name.clone()).collect();
    let mut order = epoch_order(cfg.seed, ckpt.epoch, data.len());

    while ckpt.step < stop {
        if ckpt.batch_in_epoch >= per_epoch {
            ckpt.epoch += 1;
            ckpt.batch_in_epoch = 0;
            order = epoch_order(cfg.seed, ckpt.epoch, data.len());
        }
        let start = ckpt.batch_in_epoch as usize * opt.batch_size;
        let items: Vec<(usize, usize)> = order[start..(start + opt.batch_size).min(order.len())]
            .iter()
            .copied()
            .enumerate()
            .collect();
        let (epoch, step) = (ckpt.epoch, ckpt.step);
        let model = &ckpt.model;
        let item_grad = |&(pos, index): &(usize, usize)| -> Result<(LossBreakdown, Vec<T>)> {
            let record = data.record(index, derive_seed(&[cfg.seed, WINDOW_TAG, epoch, index as u64]))?;
            let mut sampler = MaskSampler::new(
                cfg.masking_strategy,
                cfg.schedule,
                cfg.layout.future_tokens(),
                names.clone(),
                derive_seed(&[cfg.seed, MASK_TAG, step, pos as u64]),
            );
            model.loss_and_grad(&record, &sampler.sample())
        };
        let results: Vec<Result<(LossBreakdown, Vec<T>)>> = match &pool {
            Some(p) => p.install(|| items.par_iter().map(item_grad).collect()),
            None => items.iter().map(item_grad).collect(),
        };

        let mut grads = vec![T::zero(); ckpt.model.num_params()];
        let mut losses = Vec::with_capacity(results.len());
        for r in results {
            let (loss, g) = r?;
            for (a, b) in grads.iter_mut().zip(&g) {
                *a += *b;
            }
            losses.push(loss);
        }
        let loss = LossBreakdown::mean(&losses).expect("non-empty batch");
        if !loss.total.is_finite() {
            return Err(Error::Diverged { step, loss: loss.total });
        }
        let inv = T::one() / T::of(items.len() as f64);
        let mut sq = 0.0f64;
        for g in grads.iter_mut() {
            *g *= inv;
            let v = g.to_f64().unwrap_or(f64::NAN);
            sq += v * v;
        }
        let grad_norm = sq.sqrt();
        if !grad_norm.is_finite() {
            return Err(Error::Diverged { step, loss: grad_norm });
        }
        if opt.grad_clip > 0.0 && grad_norm > opt.grad_clip {
            let s = T::of(opt.grad_clip / grad_norm);
            for g in grads.iter_mut() {
                *g *= s;
            }
        }
        let lr = learning_rate(&opt, step, total);
        adam_update(&mut ckpt, &grads, &opt, lr);
        ckpt.step += 1;
        ckpt.batch_in_epoch += 1;
        observer(&StepReport {
            step: ckpt.step,
            epoch: ckpt.epoch,
            learning_rate: lr,
            loss,
            grad_norm,
        });
    }
    Ok(ckpt)
}

fn adam_update<T: Scalar>(ckpt: &mut Checkpoint<T>, grads: &[T], opt: &OptimizerConfig, lr: f64) {
    let t = (ckpt.step + 1) as i32;
    let (b1, b2) = (T::of(opt.beta1), T::of(opt.beta2));
    let c1 = 1.0 - opt.beta1.powi(t);
    let c2 = 1.0 - opt.beta2.powi(t);
    let step_size = T::of(lr / c1);
    let c2_sqrt = T::of(c2.sqrt());
    let eps = T::of(opt.eps);
    let one = T::one();
    let params = ckpt.model.params_mut();
    for (((p, m), v), &g) in params
        .iter_mut()
        .zip(ckpt.adam_m.iter_mut())
        .zip(ckpt.adam_v.iter_mut())
        .zip(grads)
    {
        *m = b1 * *m + (one - b1) * g;
        *v = b2 * *v + (one - b2) * g * g;
        *p -= step_size * *m / (v.sqrt() / c2_sqrt + eps);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_then_cosine() {
        let opt = OptimizerConfig {
            learning_rate: 1.0,
            warmup_steps: 4,
            ..OptimizerConfig::default()
        };
        assert_eq!(learning_rate(&opt, 0, 104), 0.25);
        assert_eq!(learning_rate(&opt, 3, 104), 1.0);
        assert_eq!(learning_rate(&opt, 4, 104), 1.0);
        assert!((learning_rate(&opt, 54, 104) - 0.5).abs() < 1e-12);
        assert!(learning_rate(&opt, 104, 104).abs() < 1e-12);
    }

    #[test]
    fn plain_cosine_starts_at_base() {
        let opt = OptimizerConfig::default();
        assert_eq!(learning_rate(&opt, 0, 10), opt.learning_rate);
    }

    #[test]
    fn plan_respects_cap() {
        let mut opt = OptimizerConfig {
            epochs: 3,
            batch_size: 16,
            ..OptimizerConfig::default()
        };
        assert_eq!(planned_steps(&opt, 200), 39);
        opt.max_steps = 10;
        assert_eq!(planned_steps(&opt, 200), 10);
    }

    #[test]
    fn epoch_orders_are_permutations() {
        let mut a = epoch_order(7, 0, 50);
        let b = epoch_order(7, 1, 50);
        assert_ne!(a, b);
        a.sort_unstable();
        assert_eq!(a, (0..50).collect::<Vec<_>>());
    }
}
