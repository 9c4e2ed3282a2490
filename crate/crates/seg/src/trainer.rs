//! Adam training with step decay, validation-driven early stopping and
//! view-mixed pair batches.

use std::collections::BTreeSet;
use std::path::Path;
use std::time::Instant;

use longct_core::preprocess::{PreprocessConfig, View};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint;
use crate::data::{build_batch, make_training_samples, SliceItem, TrainingPair};
use crate::error::{Error, Result};
use crate::gemm::NetScalar;
use crate::losses::{total_loss_with_grad, ClassMaps, LossBreakdown};
use crate::model::{FcDenseNet, Variant};
use crate::optim::{Adam, AdamConfig};
use crate::tensor::Act;

/// What the decay period counts.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DecayUnit {
    Epochs,
    Iterations,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub decay_factor: f64,
    pub decay_every: usize,
    pub decay_unit: DecayUnit,
    pub max_epochs: usize,
    pub early_stop_patience: usize,
    /// Images per step; each pair item contributes two.
    pub batch_size: usize,
    pub seed: u64,
    pub views: Vec<View>,
    /// Random subset of training items used per epoch; `None` uses all.
    pub max_items_per_epoch: Option<usize>,
    /// Fixed evenly spaced subset of validation items; `None` uses all.
    pub max_val_items: Option<usize>,
    pub adam: AdamConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr0: 1e-4,
            decay_factor: 0.1,
            decay_every: 50,
            decay_unit: DecayUnit::Epochs,
            max_epochs: 100,
            early_stop_patience: 5,
            batch_size: 8,
            seed: 0,
            views: View::ALL.to_vec(),
            max_items_per_epoch: None,
            max_val_items: None,
            adam: AdamConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(m.to_string()));
        if !(self.lr0 > 0.0) || !(self.decay_factor > 0.0 && self.decay_factor <= 1.0) {
            return fail("lr0 must be positive and decay_factor in (0, 1]");
        }
        if self.decay_every == 0 || self.max_epochs == 0 || self.early_stop_patience == 0 {
            return fail("decay_every, max_epochs and early_stop_patience must be positive");
        }
        if self.early_stop_patience >= self.max_epochs {
            return fail("early_stop_patience must be below max_epochs");
        }
        if self.batch_size < 2 || self.batch_size % 2 != 0 {
            return fail("batch_size must be a positive even number of images");
        }
        if self.views.is_empty() {
            return fail("at least one view is required");
        }
        if self.max_items_per_epoch == Some(0) || self.max_val_items == Some(0) {
            return fail("item caps must be positive");
        }
        Ok(())
    }
}

/// `lr0 · decay_factor^⌊counter / decay_every⌋`, where the counter is the
/// epoch or the iteration according to `decay_unit`.
pub fn lr_schedule(counter: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr0 * cfg.decay_factor.powi((counter / cfg.decay_every) as i32)
}

/// Stops once the monitored value has failed to drop strictly below the best
/// for `patience` consecutive epochs.
#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: Option<usize>,
    pub stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::INFINITY, best_epoch: None, stale: 0 }
    }

    /// Records an epoch's value; returns true when training should stop.
    pub fn observe(&mut self, epoch: usize, value: f64) -> bool {
        if value < self.best {
            self.best = value;
            self.best_epoch = Some(epoch);
            self.stale = 0;
        } else {
            self.stale += 1;
        }
        self.stale >= self.patience
    }

    pub fn improved_at(&self, epoch: usize) -> bool {
        self.best_epoch == Some(epoch)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train: LossBreakdown<f64>,
    pub val: LossBreakdown<f64>,
    pub lr: f64,
    pub steps: usize,
    /// Excluded from the serialized history so that it stays reproducible.
    #[serde(skip)]
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub variant: Variant,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub train_items: usize,
    pub val_items: usize,
}

/// Per-step training record.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub epoch: usize,
    pub step: usize,
    pub seg: f64,
    pub prog: f64,
    pub total: f64,
    pub lr: f64,
}

pub struct TrainOutcome<T> {
    /// Weights from the epoch with the lowest validation loss.
    pub model: FcDenseNet<T>,
    pub history: TrainHistory,
    pub steps: Vec<StepRecord>,
}

fn split_predictions<T: NetScalar>(probs: &[T], items: usize, per_image: usize) -> (Vec<T>, Vec<T>) {
    let mut p1 = Vec::with_capacity(items * per_image);
    let mut p0 = Vec::with_capacity(items * per_image);
    for j in 0..items {
        p1.extend_from_slice(&probs[2 * j * per_image..(2 * j + 1) * per_image]);
        p0.extend_from_slice(&probs[(2 * j + 1) * per_image..(2 * j + 2) * per_image]);
    }
    (p0, p1)
}

/// Loss of a batch's probabilities and, optionally, `dL/dprobs` in batch order.
pub fn batch_loss<T: NetScalar>(
    probs: &Act<T>,
    labels: &[u8],
    with_prog: bool,
    want_grad: bool,
) -> Result<(LossBreakdown<T>, Option<Act<T>>)> {
    let (c, pixels) = (probs.c, probs.h * probs.w);
    let items = probs.n / 2;
    let per_image = c * pixels;
    let dense = probs.to_nchw();
    let onehot = crate::losses::one_hot::<T>(labels, c, pixels);
    let (p0, p1) = split_predictions(&dense, items, per_image);
    let (y0, y1) = split_predictions(&onehot, items, per_image);
    let (loss, d0, d1) = total_loss_with_grad(
        ClassMaps::new(&p0, items, c, pixels)?,
        ClassMaps::new(&y0, items, c, pixels)?,
        ClassMaps::new(&p1, items, c, pixels)?,
        ClassMaps::new(&y1, items, c, pixels)?,
        with_prog,
    )?;
    if !want_grad {
        return Ok((loss, None));
    }
    let mut grad = vec![T::zero(); dense.len()];
    for j in 0..items {
        grad[2 * j * per_image..(2 * j + 1) * per_image].copy_from_slice(&d1[j * per_image..(j + 1) * per_image]);
        grad[(2 * j + 1) * per_image..(2 * j + 2) * per_image].copy_from_slice(&d0[j * per_image..(j + 1) * per_image]);
    }
    Ok((loss, Some(Act::from_nchw(probs.n, c, probs.h, probs.w, &grad))))
}

fn check_split(train: &[TrainingPair], val: &[TrainingPair]) -> Result<()> {
    let t: BTreeSet<&str> = train.iter().map(|p| p.patient_id.as_str()).collect();
    if let Some(shared) = val.iter().find(|p| t.contains(p.patient_id.as_str())) {
        return Err(Error::Config(format!("patient {} appears in both training and validation", shared.patient_id)));
    }
    Ok(())
}

fn evenly_spaced<T: Copy>(items: &[T], cap: Option<usize>) -> Vec<T> {
    match cap {
        Some(k) if k < items.len() => (0..k).map(|i| items[i * items.len() / k]).collect(),
        _ => items.to_vec(),
    }
}

/// Mean validation loss in evaluation mode.
pub fn evaluate_loss<T: NetScalar>(
    model: &FcDenseNet<T>,
    pairs: &[TrainingPair],
    items: &[SliceItem],
    batch_items: usize,
) -> Result<LossBreakdown<f64>> {
    let with_prog = model.config.variant == Variant::Longitudinal;
    let mut acc = LossBreakdown::<f64>::default();
    let mut weight = 0.0;
    for chunk in items.chunks(batch_items) {
        let batch = build_batch::<T>(pairs, chunk, model.config.variant);
        let probs = model.forward_eval(&batch.input)?;
        let (loss, _) = batch_loss(&probs, &batch.labels, with_prog, false)?;
        let (l, w) = (loss.to_f64(), chunk.len() as f64);
        acc.seg += l.seg * w;
        acc.prog += l.prog * w;
        weight += w;
    }
    let seg = acc.seg / weight.max(1.0);
    let prog = acc.prog / weight.max(1.0);
    Ok(LossBreakdown { seg, prog, total: seg + prog })
}

pub fn train<T: NetScalar>(
    mut model: FcDenseNet<T>,
    train_pairs: &[TrainingPair],
    val_pairs: &[TrainingPair],
    cfg: &TrainConfig,
    preprocess: &PreprocessConfig,
    diagnostic_dir: Option<&Path>,
) -> Result<TrainOutcome<T>> {
    cfg.validate()?;
    check_split(train_pairs, val_pairs)?;
    let variant = model.config.variant;
    let with_prog = variant == Variant::Longitudinal;
    let train_set = make_training_samples(train_pairs, &cfg.views, preprocess);
    let val_set = make_training_samples(val_pairs, &cfg.views, preprocess);
    if train_set.items.is_empty() || val_set.items.is_empty() {
        return Err(Error::Config(format!(
            "need training and validation slices, got {} and {}",
            train_set.items.len(),
            val_set.items.len()
        )));
    }
    let val_items = evenly_spaced(&val_set.items, cfg.max_val_items);
    let batch_items = cfg.batch_size / 2;
    let mut adam = Adam::new(cfg.adam, &model);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut best = model.clone();
    let mut epochs = Vec::new();
    let mut steps = Vec::new();
    let mut iteration = 0usize;
    let mut stopped_early = false;

    for epoch in 0..cfg.max_epochs {
        let start = Instant::now();
        let mut order = train_set.items.clone();
        let mut shuffle_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        shuffle_rng.set_stream(epoch as u64 + 1);
        order.shuffle(&mut shuffle_rng);
        if let Some(k) = cfg.max_items_per_epoch {
            order.truncate(k);
        }
        let mut acc = LossBreakdown::<f64>::default();
        let mut n_steps = 0;
        let mut lr = lr_schedule(if cfg.decay_unit == DecayUnit::Epochs { epoch } else { iteration }, cfg);
        for chunk in order.chunks(batch_items) {
            if cfg.decay_unit == DecayUnit::Iterations {
                lr = lr_schedule(iteration, cfg);
            }
            let batch = build_batch::<T>(train_pairs, chunk, variant);
            let tape = model.forward_train(&batch.input, &mut dropout_rng)?;
            let (loss, grad) = batch_loss(&tape.probs, &batch.labels, with_prog, true)?;
            if !loss.is_finite() {
                let checkpoint = match diagnostic_dir {
                    Some(dir) => {
                        let path = dir.join("diagnostic.safetensors");
                        checkpoint::save(&model, &path, &format!("non-finite loss at epoch {epoch}, step {n_steps}"))?;
                        Some(path)
                    }
                    None => None,
                };
                return Err(Error::NonFiniteLoss { epoch, step: n_steps, checkpoint });
            }
            model.zero_grad();
            model.backward(&tape, &grad.expect("gradient requested"));
            adam.step(&mut model, lr);
            let l = loss.to_f64();
            steps.push(StepRecord { epoch, step: iteration, seg: l.seg, prog: l.prog, total: l.total, lr });
            acc.seg += l.seg;
            acc.prog += l.prog;
            n_steps += 1;
            iteration += 1;
        }
        let n = n_steps.max(1) as f64;
        let train_loss = LossBreakdown { seg: acc.seg / n, prog: acc.prog / n, total: (acc.seg + acc.prog) / n };
        let val = evaluate_loss(&model, val_pairs, &val_items, batch_items)?;
        if !val.total.is_finite() {
            return Err(Error::NonFiniteLoss { epoch, step: n_steps, checkpoint: None });
        }
        let stop = stopper.observe(epoch, val.total);
        if stopper.improved_at(epoch) {
            best = model.clone();
        }
        let wall_seconds = start.elapsed().as_secs_f64();
        log::info!(
            "{variant:?} epoch {epoch}: train {:.5} (seg {:.5}, prog {:.5}) val {:.5} lr {lr:e} {wall_seconds:.1}s",
            train_loss.total,
            train_loss.seg,
            train_loss.prog,
            val.total
        );
        epochs.push(EpochRecord { epoch, train: train_loss, val, lr, steps: n_steps, wall_seconds });
        if stop {
            stopped_early = true;
            break;
        }
    }
    let history = TrainHistory {
        variant,
        epochs,
        best_epoch: stopper.best_epoch.unwrap_or(0),
        stopped_early,
        train_items: train_set.items.len(),
        val_items: val_items.len(),
    };
    Ok(TrainOutcome { model: best, history, steps })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_values() {
        let cfg = TrainConfig::default();
        let lrs: Vec<f64> = [0, 49, 50, 99].iter().map(|&e| lr_schedule(e, &cfg)).collect();
        assert_eq!(lrs[0], 1e-4);
        assert_eq!(lrs[1], 1e-4);
        assert!((lrs[2] - 1e-5).abs() < 1e-20);
        assert!((lrs[3] - 1e-5).abs() < 1e-20);
        let mut prev = f64::INFINITY;
        for e in 0..300 {
            let lr = lr_schedule(e, &cfg);
            assert!(lr > 0.0 && lr <= prev);
            prev = lr;
        }
    }

    /// Replays a validation trace through a stub loop.
    fn simulate(trace: &[f64], patience: usize) -> (usize, usize) {
        let mut s = EarlyStopping::new(patience);
        for (i, &v) in trace.iter().enumerate() {
            if s.observe(i, v) {
                return (i + 1, s.best_epoch.unwrap());
            }
        }
        (trace.len(), s.best_epoch.unwrap())
    }

    #[test]
    fn early_stopping_trace() {
        let trace = [1.0, 0.9, 0.9, 0.9, 0.9, 0.9, 0.9, 0.1];
        assert_eq!(simulate(&trace, 5), (7, 1));
        assert_eq!(simulate(&[1.0, 0.9, 0.8, 0.7], 5), (4, 3));
        assert_eq!(simulate(&[1.0, 1.0, 1.0], 2), (3, 0));
    }

    #[test]
    fn config_checks() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { batch_size: 7, ..Default::default() },
            TrainConfig { early_stop_patience: 100, ..Default::default() },
            TrainConfig { lr0: 0.0, ..Default::default() },
            TrainConfig { views: vec![], ..Default::default() },
        ] {
            assert!(bad.validate().is_err());
        }
    }

    #[test]
    fn evenly_spaced_subset() {
        let v: Vec<usize> = (0..10).collect();
        assert_eq!(evenly_spaced(&v, Some(5)), vec![0, 2, 4, 6, 8]);
        assert_eq!(evenly_spaced(&v, Some(20)).len(), 10);
    }
}
