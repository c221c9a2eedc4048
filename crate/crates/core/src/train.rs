//! Adam optimizer and the mini-batch training loop.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{BatchIter, Dataset};
use crate::error::{Error, Result};
use crate::metrics::{MetricAccumulator, Metrics};
use crate::model::Model;
use crate::nn::Forward;
use crate::params::ParamStore;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub freeze_encoder: bool,
    /// Stop once validation micro-F1 reaches this value.
    pub stop_at_f1: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            epochs: 30,
            batch_size: 16,
            seed: 0,
            freeze_encoder: false,
            stop_at_f1: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return fail(format!("lr must be positive, got {}", self.lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail("beta1 and beta2 must lie in [0, 1)".into());
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return fail("eps must be positive".into());
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1".into());
        }
        Ok(())
    }
}

/// Adam with bias correction, one moment pair per parameter tensor.
#[derive(Debug, Clone)]
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(store: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f64>> = store.iter().map(|(_, _, t)| vec![0.0; t.len()]).collect();
        Self {
            lr: cfg.lr,
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            eps: cfg.eps,
            step: 0,
            first: zeros.clone(),
            second: zeros,
        }
    }

    /// Applies the accumulated gradients. Frozen parameters are skipped.
    pub fn step(&mut self, store: &mut ParamStore) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        let ids: Vec<_> = store.ids().collect();
        for (k, id) in ids.into_iter().enumerate() {
            if store.is_frozen(id) {
                continue;
            }
            let tensor = store.get_mut(id);
            let Some(grad) = tensor.grad().map(<[f64]>::to_vec) else {
                continue;
            };
            let (m, v) = (&mut self.first[k], &mut self.second[k]);
            for (i, w) in tensor.data_mut().iter_mut().enumerate() {
                let g = grad[i];
                m[i] = self.beta1 * m[i] + (1.0 - self.beta1) * g;
                v[i] = self.beta2 * v[i] + (1.0 - self.beta2) * g * g;
                *w -= self.lr * (m[i] / c1) / ((v[i] / c2).sqrt() + self.eps);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid: Option<Metrics>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub epochs: Vec<EpochLog>,
    /// Epoch whose parameters were restored into the model at the end.
    pub best_epoch: usize,
    pub best_valid_f1: Option<f64>,
}

/// Drops trailing padding so the encoder sees exactly the real tokens.
fn real_tokens<'a>(tokens: &'a [usize], mask: &[bool]) -> &'a [usize] {
    let n = mask.iter().take_while(|&&m| m).count();
    &tokens[..n]
}

/// Mean-over-batch loss for one step; returns the loss value after writing
/// gradients into `model.params`.
fn train_step(model: &mut Model, batch: &crate::data::Batch, rng: ChaCha8Rng) -> Result<f64> {
    let (value, tape, grads) = {
        let mut f = Forward::train(&model.params, rng);
        let queries = model.queries(&mut f)?;
        let mut total = None;
        for ((tokens, mask), gold) in batch.tokens.iter().zip(&batch.mask).zip(&batch.labels) {
            let loss = model.sample_loss(&mut f, queries, real_tokens(tokens, mask), gold)?;
            total = Some(match total {
                None => loss,
                Some(t) => f.tape.add(t, loss)?,
            });
        }
        let total = total.ok_or_else(|| Error::Contract("empty batch".into()))?;
        let loss = f.tape.scale(total, 1.0 / batch.len() as f64);
        let value = f.tape.value(loss).data()[0];
        if !value.is_finite() {
            return Ok(value);
        }
        let grads = f.tape.backward(loss)?;
        (value, f.into_tape(), grads)
    };
    model.params.zero_grad();
    tape.accumulate_param_grads(&grads, &mut model.params);
    Ok(value)
}

/// Dropout stream for one step, independent of everything but the indices.
fn step_rng(seed: u64, epoch: usize, step: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_d409_0f0f_0f0f);
    rng.set_stream(((epoch as u64) << 32) | step as u64);
    rng
}

pub fn evaluate(model: &Model, ds: &Dataset) -> Result<MetricAccumulator> {
    let mut acc = MetricAccumulator::new(model.config.num_labels);
    for s in ds.iter() {
        let pred = model.predict(&s.tokens)?;
        acc.accumulate(&s.labels, &pred)?;
    }
    Ok(acc)
}

/// Same counts as [`evaluate`], with the samples split into contiguous
/// shards scored on `workers` threads and merged. Counts are integers, so
/// the result does not depend on the worker count.
pub fn evaluate_sharded(model: &Model, ds: &Dataset, workers: usize) -> Result<MetricAccumulator> {
    let workers = workers.max(1).min(ds.len().max(1));
    if workers == 1 {
        return evaluate(model, ds);
    }
    let samples: Vec<_> = ds.iter().collect();
    let chunk = samples.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = samples
            .chunks(chunk)
            .map(|shard| {
                scope.spawn(move || -> Result<MetricAccumulator> {
                    let mut acc = MetricAccumulator::new(model.config.num_labels);
                    for s in shard {
                        acc.accumulate(&s.labels, &model.predict(&s.tokens)?)?;
                    }
                    Ok(acc)
                })
            })
            .collect();
        let mut total = MetricAccumulator::new(model.config.num_labels);
        for h in handles {
            let part = h
                .join()
                .map_err(|_| Error::Contract("evaluation worker panicked".into()))??;
            total = total.merge(&part);
        }
        Ok(total)
    })
}

/// Trains `model` in place. `on_epoch` runs after every epoch with the
/// model at that epoch's parameters and a flag telling whether validation
/// improved; a checkpoint saved there survives a later divergence.
///
/// At the end the best-validation parameters are restored. Without a
/// validation split, the last epoch counts as best.
pub fn train(
    model: &mut Model,
    train_set: &Dataset,
    valid_set: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog, &Model, bool) -> Result<()>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(Error::Validation("training split is empty".into()));
    }
    model.set_encoder_frozen(cfg.freeze_encoder);
    let mut adam = Adam::new(&model.params, cfg);
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, Vec<Vec<f64>>)> = None;

    for epoch in 1..=cfg.epochs {
        let mut loss_sum = 0.0;
        let mut seen = 0usize;
        for (step, batch) in
            BatchIter::new(train_set, cfg.batch_size, cfg.seed, epoch as u64)?.enumerate()
        {
            // Overflowed activations trip the numeric guards before the loss exists.
            let loss =
                train_step(model, &batch, step_rng(cfg.seed, epoch, step)).map_err(
                    |e| match e {
                        Error::NumericDomain { .. } => Error::Diverged { epoch, step },
                        e => e,
                    },
                )?;
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, step });
            }
            adam.step(&mut model.params);
            if !model.params.iter().all(|(_, _, t)| t.all_finite()) {
                return Err(Error::Diverged { epoch, step });
            }
            loss_sum += loss * batch.len() as f64;
            seen += batch.len();
        }
        let valid = if valid_set.is_empty() {
            None
        } else {
            Some(evaluate(model, valid_set)?.finalize())
        };
        let log = EpochLog {
            epoch,
            train_loss: loss_sum / seen as f64,
            valid,
        };
        let improved = match (&best, valid) {
            (_, None) => true,
            (None, Some(_)) => true,
            (Some((_, f1, _)), Some(v)) => v.f1 > *f1,
        };
        if improved {
            best = Some((epoch, valid.map_or(0.0, |v| v.f1), model.snapshot()));
        }
        match valid {
            Some(v) => log::info!(
                "epoch {epoch}: train loss {:.6}, valid f1 {:.4}, hl {:.4}",
                log.train_loss,
                v.f1,
                v.hamming_loss
            ),
            None => log::info!("epoch {epoch}: train loss {:.6}", log.train_loss),
        }
        on_epoch(&log, model, improved)?;
        epochs.push(log);
        if let (Some(target), Some(v)) = (cfg.stop_at_f1, valid) {
            if v.f1 >= target {
                break;
            }
        }
    }

    let (best_epoch, best_valid_f1) = match best {
        Some((epoch, f1, snapshot)) => {
            model.restore(&snapshot);
            (epoch, (!valid_set.is_empty()).then_some(f1))
        }
        None => (0, None),
    };
    Ok(TrainOutcome {
        epochs,
        best_epoch,
        best_valid_f1,
    })
}
