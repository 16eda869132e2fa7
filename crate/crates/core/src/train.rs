//! Mini-batch training with Adam, validation after every epoch, and early
//! stopping on validation mean-foreground soft DSC.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::data::split::{batch_order, make_batch};
use crate::data::Sample;
use crate::error::{Error, Result};
use crate::loss::{self, FocalConfig};
use crate::model::{self, ModelSpec, ParamSet};
use crate::optim::{AdamConfig, AdamState};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Stream ids keep the initialisation, shuffling and dropout draws apart.
const DROPOUT_STREAM_SALT: u64 = 0x6472_6f70_6f75_7400;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub adam: AdamConfig,
    pub focal: FocalConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 16,
            max_epochs: 200,
            patience: 20,
            seed: 0,
            adam: AdamConfig::default(),
            focal: FocalConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, spec: &ModelSpec) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        if self.patience == 0 {
            return Err(Error::Config("patience must be at least 1".into()));
        }
        self.adam.validate()?;
        self.focal.validate(spec.num_classes)
    }
}

/// One completed epoch; `epoch` counts from 1.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
    pub train_dsc: f64,
    pub val_dsc: f64,
    pub seconds: f64,
}

impl EpochLog {
    /// Every field except wall-clock time, bit for bit.
    pub fn same_metrics(&self, other: &EpochLog) -> bool {
        self.epoch == other.epoch
            && [
                (self.train_loss, other.train_loss),
                (self.val_loss, other.val_loss),
                (self.train_acc, other.train_acc),
                (self.val_acc, other.val_acc),
                (self.train_dsc, other.train_dsc),
                (self.val_dsc, other.val_dsc),
            ]
            .iter()
            .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

/// Split-level metrics. DSC values average per-sample mean-foreground scores.
#[derive(Debug, Clone, PartialEq)]
pub struct Metrics {
    pub loss: f64,
    pub accuracy: f64,
    pub soft_dsc: f64,
    pub hard_dsc: f64,
    /// Per foreground class, in label order.
    pub per_class_soft: Vec<f64>,
    pub per_class_hard: Vec<f64>,
    pub samples: usize,
}

/// Monotonic seconds source; the core crate has no clock of its own.
pub trait Clock {
    fn now(&mut self) -> f64;
}

/// A clock that never advances.
#[derive(Debug, Clone, Copy, Default)]
pub struct NoClock;

impl Clock for NoClock {
    fn now(&mut self) -> f64 {
        0.0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
    /// Loss or gradient went non-finite; the best parameters so far are kept.
    Diverged(Error),
}

#[derive(Debug, Clone)]
pub struct FitOutcome<T> {
    /// Parameters of the best validation epoch (the initial ones if none completed).
    pub params: ParamSet<T>,
    pub logs: Vec<EpochLog>,
    pub best_epoch: Option<usize>,
    pub best_val_dsc: f64,
    pub stop: StopReason,
}

const EVAL_BATCH: usize = 16;

/// Eval-mode metrics over `samples` in fixed order.
pub fn evaluate<T: Scalar>(
    spec: &ModelSpec,
    params: &ParamSet<T>,
    samples: &[Sample],
    focal: &FocalConfig,
) -> Result<Metrics> {
    if samples.is_empty() {
        return Err(Error::invalid("evaluate", "empty split"));
    }
    let mut acc = Accumulator::default();
    let indices: Vec<usize> = (0..samples.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let batch = make_batch::<T>(samples, chunk.to_vec());
        let logits = model::predict_logits(spec, params, &batch.images)?;
        let target = loss::one_hot_batch::<T>(&batch.masks, spec.num_classes)?;
        let l = loss::focal_loss(&logits, &target, focal)?;
        acc.add_batch(l, &logits, &target, &batch.masks, true)?;
    }
    Ok(acc.finish())
}

#[derive(Default)]
struct Accumulator {
    loss: f64,
    correct: f64,
    pixels: f64,
    soft: Vec<f64>,
    hard: Vec<f64>,
    soft_mean: f64,
    hard_mean: f64,
    samples: usize,
}

impl Accumulator {
    fn add_batch<T: Scalar>(
        &mut self,
        batch_loss: f64,
        logits: &Tensor<T>,
        target: &Tensor<T>,
        masks: &[crate::data::LabelMask],
        hard: bool,
    ) -> Result<()> {
        let probs = loss::probabilities(logits);
        let n = masks.len();
        self.loss += batch_loss * n as f64;
        for (k, mask) in masks.iter().enumerate() {
            let p = probs.sample(k)?;
            let g = target.sample(k)?;
            let soft = loss::dice_report(&p, &g)?;
            self.soft_mean += soft.mean_foreground;
            add_into(&mut self.soft, &soft.per_class);
            if hard {
                let h = loss::dice_report(&loss::binarize(&p)?, &g)?;
                self.hard_mean += h.mean_foreground;
                add_into(&mut self.hard, &h.per_class);
            }
            let pred = loss::argmax_labels(&probs, k)?;
            let px = mask.labels().len() as f64;
            self.correct += loss::pixel_accuracy(&pred, mask)? * px;
            self.pixels += px;
        }
        self.samples += n;
        Ok(())
    }

    fn finish(&self) -> Metrics {
        let n = self.samples.max(1) as f64;
        Metrics {
            loss: self.loss / n,
            accuracy: self.correct / self.pixels.max(1.0),
            soft_dsc: self.soft_mean / n,
            hard_dsc: self.hard_mean / n,
            per_class_soft: self.soft.iter().map(|v| v / n).collect(),
            per_class_hard: self.hard.iter().map(|v| v / n).collect(),
            samples: self.samples,
        }
    }
}

fn add_into(acc: &mut Vec<f64>, values: &[f64]) {
    if acc.is_empty() {
        acc.resize(values.len(), 0.0);
    }
    for (a, v) in acc.iter_mut().zip(values) {
        *a += v;
    }
}

/// Build fresh parameters from `cfg.seed`, then [`fit_from`].
pub fn fit<T: Scalar>(
    spec: &ModelSpec,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    clock: &mut dyn Clock,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<FitOutcome<T>> {
    let init = model::build(spec, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    fit_from(spec, init, train, val, cfg, clock, on_epoch)
}

pub fn fit_from<T: Scalar>(
    spec: &ModelSpec,
    mut params: ParamSet<T>,
    train: &[Sample],
    val: &[Sample],
    cfg: &TrainConfig,
    clock: &mut dyn Clock,
    on_epoch: &mut dyn FnMut(&EpochLog),
) -> Result<FitOutcome<T>> {
    cfg.validate(spec)?;
    params.check_complete(spec)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::invalid("fit", "train and validation splits must be nonempty"));
    }
    check_extents(spec, train)?;
    check_extents(spec, val)?;
    if let Some(i) = val.iter().position(|v| train.contains(v)) {
        return Err(Error::invalid(
            "fit",
            format!("validation sample {i} also appears in the training split"),
        ));
    }

    let mut adam = AdamState::new(cfg.adam, &params);
    let mut best = params.clone();
    let mut best_epoch = None;
    let mut best_dsc = f64::NEG_INFINITY;
    let mut logs = Vec::new();
    let mut stop = StopReason::MaxEpochs;

    for epoch in 1..=cfg.max_epochs {
        let start = clock.now();
        let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ DROPOUT_STREAM_SALT);
        dropout_rng.set_stream(epoch as u64);
        let mut acc = Accumulator::default();
        let mut failure = None;
        for indices in batch_order(train.len(), cfg.batch_size, cfg.seed, epoch) {
            let batch = make_batch::<T>(train, indices);
            match train_step(spec, &mut params, &mut adam, &batch, cfg, &mut dropout_rng, epoch) {
                Ok((l, logits, target)) => acc.add_batch(l, &logits, &target, &batch.masks, false)?,
                Err(e @ (Error::Diverged { .. } | Error::NonFiniteGradient { .. })) => {
                    failure = Some(e);
                    break;
                }
                Err(e) => return Err(e),
            }
        }
        if let Some(e) = failure {
            stop = StopReason::Diverged(e);
            break;
        }
        let tm = acc.finish();
        let vm = evaluate(spec, &params, val, &cfg.focal)?;
        if !vm.loss.is_finite() {
            stop = StopReason::Diverged(Error::Diverged { epoch });
            break;
        }
        let log = EpochLog {
            epoch,
            train_loss: tm.loss,
            val_loss: vm.loss,
            train_acc: tm.accuracy,
            val_acc: vm.accuracy,
            train_dsc: tm.soft_dsc,
            val_dsc: vm.soft_dsc,
            seconds: clock.now() - start,
        };
        on_epoch(&log);
        logs.push(log);
        if vm.soft_dsc > best_dsc {
            best_dsc = vm.soft_dsc;
            best_epoch = Some(epoch);
            best = params.clone();
        } else if epoch - best_epoch.unwrap_or(0) >= cfg.patience {
            stop = StopReason::EarlyStop;
            break;
        }
    }
    Ok(FitOutcome {
        params: best,
        logs,
        best_epoch,
        best_val_dsc: best_dsc,
        stop,
    })
}

fn check_extents(spec: &ModelSpec, samples: &[Sample]) -> Result<()> {
    match samples
        .iter()
        .position(|s| s.image.width() != spec.input_size || s.image.height() != spec.input_size)
    {
        Some(i) => Err(Error::invalid(
            "fit",
            format!(
                "sample {i} is {}x{}, model expects {2}x{2}",
                samples[i].image.width(),
                samples[i].image.height(),
                spec.input_size
            ),
        )),
        None => Ok(()),
    }
}

type StepOutput<T> = (f64, Tensor<T>, Tensor<T>);

fn train_step<T: Scalar>(
    spec: &ModelSpec,
    params: &mut ParamSet<T>,
    adam: &mut AdamState<T>,
    batch: &crate::data::Batch<T>,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
    epoch: usize,
) -> Result<StepOutput<T>> {
    let mut tape = Tape::new();
    let bound = params.bind(&mut tape, true);
    let x = tape.constant(batch.images.clone());
    let out = model::forward(&mut tape, spec, &bound, x, true, rng)?;
    let target = loss::one_hot_batch::<T>(&batch.masks, spec.num_classes)?;
    let l = tape.focal_loss(out.logits, &target, &cfg.focal)?;
    let value = tape.value(l).item().map_or(f64::NAN, |v| v.as_f64());
    if !value.is_finite() {
        return Err(Error::Diverged { epoch });
    }
    let mut grads = tape.backward(l)?;
    let mut named = BTreeMap::new();
    for (name, var) in bound.iter() {
        let g = grads
            .take(var)
            .unwrap_or_else(|| Tensor::zeros(tape.shape(var)));
        named.insert(String::from(name), g);
    }
    adam.step(params, &named)?;
    Ok((value, tape.value(out.logits).clone(), target))
}
