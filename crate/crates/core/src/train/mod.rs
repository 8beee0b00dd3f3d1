//! Desk-scale training: smoothed cross entropy, AdamW with warmup and cosine decay.

pub mod data;
mod loss;
pub mod optim;

use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use data::{generate_blobs, DatasetHandle};
pub use loss::smoothed_cross_entropy;
pub use optim::{AdamW, AdamWConfig, CosineSchedule};

use crate::error::{config_err, Error, Result};
use crate::net::Network;
use crate::ops::Mode;

/// Reference batch size for the base learning rate.
pub const LR_REFERENCE_BATCH: usize = 128;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optimizer: AdamWConfig,
    /// Learning rate at a batch of 128; scaled linearly with the batch size.
    pub base_lr: f64,
    pub warmup_epochs: usize,
    pub label_smoothing: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of samples held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            optimizer: AdamWConfig::default(),
            base_lr: 1.25e-4,
            warmup_epochs: 20,
            label_smoothing: 0.1,
            epochs: 300,
            batch_size: 128,
            val_fraction: 0.2,
            seed: 0,
        }
    }
}

impl TrainConfig {
    /// Settings for the synthetic blob task.
    pub fn desk() -> Self {
        TrainConfig { base_lr: 5e-3, warmup_epochs: 2, epochs: 20, batch_size: 32, ..Default::default() }
    }

    pub fn lr_for_batch(&self) -> f64 {
        self.base_lr * self.batch_size as f64 / LR_REFERENCE_BATCH as f64
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(config_err!("label smoothing must lie in [0, 1)"));
        }
        if self.batch_size < 2 {
            return Err(config_err!("batch size must be at least 2 for batch statistics"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(config_err!("validation fraction must lie in [0, 1)"));
        }
        if self.base_lr < 0.0 || !self.base_lr.is_finite() {
            return Err(config_err!("learning rate must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,lr,train_loss,train_acc,val_acc\n");
        for e in &self.epochs {
            let _ = writeln!(s, "{},{:e},{},{},{}", e.epoch, e.lr, e.train_loss, e.train_acc, e.val_acc);
        }
        s
    }

    pub fn last(&self) -> Option<&EpochRecord> {
        self.epochs.last()
    }
}

fn argmax(row: &[f64]) -> usize {
    row.iter().enumerate().fold(0, |best, (i, &v)| if v > row[best] { i } else { best })
}

/// Deterministic train/validation split: every k-th sample is held out.
pub fn split_indices(len: usize, val_fraction: f64) -> (Vec<usize>, Vec<usize>) {
    if val_fraction <= 0.0 {
        return ((0..len).collect(), Vec::new());
    }
    let every = (1.0 / val_fraction).round().max(2.0) as usize;
    (0..len).partition(|i| i % every != every - 1)
}

/// Accuracy of eval-mode predictions on `indices`.
pub fn evaluate(net: &Network, data: &DatasetHandle, indices: &[usize], batch: usize) -> Result<f64> {
    if indices.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for chunk in indices.chunks(batch.max(1)) {
        let (x, y) = data.batch(chunk)?;
        correct += net.predict(&x)?.iter().zip(&y).filter(|(row, &l)| argmax(row) == l).count();
    }
    Ok(correct as f64 / indices.len() as f64)
}

/// Trains `net` in place and returns one record per epoch.
pub fn train(net: &mut Network, data: &DatasetHandle, cfg: &TrainConfig) -> Result<History> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(config_err!("dataset is empty"));
    }
    if data.classes > net.config().num_classes {
        return Err(config_err!("{} classes exceed the network's {} outputs", data.classes, net.config().num_classes));
    }
    let (train_idx, val_idx) = split_indices(data.len(), cfg.val_fraction);
    // a trailing single-sample batch cannot be batch-normalized
    let steps_per_epoch = train_idx.len() / cfg.batch_size + usize::from(train_idx.len() % cfg.batch_size >= 2);
    let schedule = CosineSchedule {
        base: cfg.lr_for_batch(),
        warmup: cfg.warmup_epochs * steps_per_epoch,
        total: cfg.epochs * steps_per_epoch,
    };
    let mut opt = AdamW::new(cfg.optimizer);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut history = History::default();
    let mut step = 0;
    for epoch in 0..cfg.epochs {
        let mut order = train_idx.clone();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut seen, mut correct) = (0.0, 0usize, 0usize);
        let mut lr = schedule.lr(step);
        for chunk in order.chunks(cfg.batch_size).filter(|c| c.len() >= 2) {
            lr = schedule.lr(step);
            let (x, y) = data.batch(chunk)?;
            net.zero_grad();
            let logits = net.forward(&x, Mode::Train)?;
            let (loss, grad) = smoothed_cross_entropy(&logits, &y, cfg.label_smoothing)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("loss {loss} at epoch {epoch}, step {step}, lr {lr:e}")));
            }
            net.backward(&grad)?;
            opt.step(net, lr);
            let k = logits.dims().c;
            correct += logits.data().chunks(k).zip(&y).filter(|(row, &l)| argmax(row) == l).count();
            loss_sum += loss * chunk.len() as f64;
            seen += chunk.len();
            step += 1;
        }
        history.epochs.push(EpochRecord {
            epoch: epoch + 1,
            lr,
            train_loss: loss_sum / seen as f64,
            train_acc: correct as f64 / seen as f64,
            val_acc: evaluate(net, data, &val_idx, cfg.batch_size)?,
        });
    }
    Ok(history)
}
