//! Training: stochastic gradient descent with momentum and weight decay, a
//! reduce-on-plateau learning-rate schedule, early stopping, and the epoch
//! loop tying them together.

use std::path::Path;

use serde::Serialize;

use crate::checkpoint;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::eval::{accuracy, predict_all};
use crate::net::{Mode, Network, ParamStore};
use crate::rng::Rng;
use crate::tape::{Gradients, Tape};
use crate::tensor::{c, Scalar};
use crate::transform::{encode_batch, epoch_batches, Augment};

/// SGD with classical momentum. Weight decay is added to the gradient before
/// the momentum update and applies to every parameter:
///
/// ```text
/// g' = g + wd * w
/// v  = momentum * v + g'
/// w  = w - lr * v
/// ```
pub struct Sgd<T> {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Sgd<T> {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Sgd<T> {
        Sgd { lr, momentum, weight_decay, velocity: Vec::new() }
    }

    /// Apply one update from a backward pass's gradients.
    pub fn step(&mut self, store: &mut ParamStore<T>, grads: &Gradients<T>) -> Result<()> {
        let lr = c::<T>(self.lr);
        let momentum = c::<T>(self.momentum);
        let wd = c::<T>(self.weight_decay);
        if self.velocity.len() < store.num_params() {
            self.velocity.resize_with(store.num_params(), || None);
        }
        for id in store.param_ids().collect::<Vec<_>>() {
            let g = grads.param(id).ok_or_else(|| {
                Error::Contract(format!(
                    "gradient missing for parameter {}",
                    store.param_name(id)
                ))
            })?;
            let g = g.data().to_vec();
            let v = self.velocity[id.0 as usize]
                .get_or_insert_with(|| vec![T::zero(); g.len()]);
            let w = store.param_mut(id);
            for ((wv, vv), gv) in w.data_mut().iter_mut().zip(v.iter_mut()).zip(&g) {
                let g_total = *gv + wd * *wv;
                *vv = momentum * *vv + g_total;
                *wv -= lr * *vv;
            }
        }
        Ok(())
    }
}

/// Multiply the learning rate by `factor` after `patience` consecutive
/// observations without a strict improvement over the best seen so far. The
/// non-improvement streak resets after each reduction.
pub struct PlateauScheduler {
    pub factor: f64,
    pub patience: usize,
    best: f64,
    streak: usize,
}

impl PlateauScheduler {
    pub fn new(factor: f64, patience: usize) -> PlateauScheduler {
        PlateauScheduler { factor, patience, best: f64::NEG_INFINITY, streak: 0 }
    }

    /// Feed one validation metric (higher is better). Returns the reduction
    /// factor to apply, if any.
    pub fn observe(&mut self, metric: f64) -> Option<f64> {
        if metric > self.best {
            self.best = metric;
            self.streak = 0;
            return None;
        }
        self.streak += 1;
        if self.streak >= self.patience {
            self.streak = 0;
            return Some(self.factor);
        }
        None
    }
}

/// Stop after `patience` consecutive observations without strict improvement.
/// Tracks its own streak, independent of any scheduler.
pub struct EarlyStop {
    pub patience: usize,
    best: f64,
    streak: usize,
}

impl EarlyStop {
    pub fn new(patience: usize) -> EarlyStop {
        EarlyStop { patience, best: f64::NEG_INFINITY, streak: 0 }
    }

    /// Feed one validation metric (higher is better). True means stop.
    pub fn observe(&mut self, metric: f64) -> bool {
        if metric > self.best {
            self.best = metric;
            self.streak = 0;
            return false;
        }
        self.streak += 1;
        self.streak >= self.patience
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub augment: bool,
    pub shuffle: bool,
    pub seed: u64,
    /// Stop as soon as validation accuracy reaches this value.
    pub stop_at_val_acc: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            momentum: 0.9,
            weight_decay: 1e-3,
            batch_size: 48,
            epochs: 50,
            plateau_factor: 0.1,
            plateau_patience: 2,
            early_stop_patience: 8,
            augment: true,
            shuffle: true,
            seed: 0,
            stop_at_val_acc: None,
        }
    }
}

/// One epoch's summary, also a row of the training log.
#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_acc: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_val_acc: f64,
    pub best_epoch: usize,
    pub stopped_early: bool,
    pub final_lr: f64,
}

/// Train `net` on `train`, validating on `val` each epoch. The best-validation
/// parameters are written to `save_best` (when given) as they appear, and
/// `on_epoch` fires after every epoch with the freshly logged record.
pub fn fit<T: Scalar>(
    net: &mut Network<T>,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    save_best: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochRecord),
) -> Result<TrainReport> {
    if train.is_empty() {
        return Err(Error::Contract("training dataset is empty".into()));
    }
    if val.is_empty() {
        return Err(Error::Contract("validation dataset is empty".into()));
    }
    if cfg.batch_size == 0 || cfg.epochs == 0 {
        return Err(Error::Contract("batch size and epoch count must be positive".into()));
    }

    let target = net.spec().input_size;
    let mut sgd = Sgd::new(cfg.lr, cfg.momentum, cfg.weight_decay);
    let mut scheduler = PlateauScheduler::new(cfg.plateau_factor, cfg.plateau_patience);
    let mut stopper = EarlyStop::new(cfg.early_stop_patience);
    let aug = Augment::default();

    let mut report = TrainReport {
        epochs: Vec::new(),
        best_val_acc: f64::NEG_INFINITY,
        best_epoch: 0,
        stopped_early: false,
        final_lr: cfg.lr,
    };

    for epoch in 1..=cfg.epochs {
        let batches = epoch_batches(train.len(), cfg.batch_size, cfg.seed, epoch, cfg.shuffle);
        // separate stream from the shuffle so adding augmentation never
        // changes batch composition
        let mut aug_rng = Rng::new(cfg.seed).fork(0x00AA_0000 + epoch as u64);

        let mut loss_sum = 0.0f64;
        let mut seen = 0usize;
        for (batch_no, idxs) in batches.iter().enumerate() {
            let refs: Vec<&crate::data::Sample> =
                idxs.iter().map(|&i| &train.samples[i]).collect();
            let aug_opt = if cfg.augment { Some((&aug, &mut aug_rng)) } else { None };
            let (xs, labels) = encode_batch::<T>(&refs, target, aug_opt)?;

            let mut tape = Tape::recording();
            let x = tape.leaf(xs);
            let trace = net.forward(&mut tape, Mode::Train, &x)?;
            let (loss, _probs) = tape.cross_entropy(&trace.logits, &labels)?;
            let loss_v = loss.data().data()[0].to_f64();
            if !loss_v.is_finite() {
                return Err(Error::NonFinite(format!(
                    "training loss became {loss_v} at epoch {epoch}, batch {batch_no}"
                )));
            }
            loss_sum += loss_v * refs.len() as f64;
            seen += refs.len();

            let grads = tape.backward(&loss)?;
            drop(tape);
            sgd.step(net.store_mut(), &grads)?;
        }
        let train_loss = loss_sum / seen as f64;

        let (preds, labels) = predict_all(net, val, cfg.batch_size)?;
        let val_acc = accuracy(&preds, &labels);

        if val_acc > report.best_val_acc {
            report.best_val_acc = val_acc;
            report.best_epoch = epoch;
            if let Some(path) = save_best {
                checkpoint::save(net, path)?;
            }
        }

        if let Some(factor) = scheduler.observe(val_acc) {
            sgd.lr *= factor;
        }
        report.final_lr = sgd.lr;

        let record = EpochRecord { epoch, train_loss, val_acc, lr: sgd.lr };
        on_epoch(&record);
        report.epochs.push(record);

        if cfg.stop_at_val_acc.is_some_and(|t| val_acc >= t) {
            break;
        }
        if stopper.observe(val_acc) {
            report.stopped_early = true;
            break;
        }
    }
    Ok(report)
}
