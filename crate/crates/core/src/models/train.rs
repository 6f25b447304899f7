use std::io::Write;

use ndarray::{Array2, Array3};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::features::WindowedDataset;
use crate::nn::{clip_global_norm, mse_loss, rng_from_seed, Optimizer, Parameters};
use crate::tuning::HyperParams;

use super::{ModelError, MultiBranchLstm, Result};

const EVAL_CHUNK: usize = 512;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainSchedule {
    pub max_epochs: usize,
    /// Stop after this many epochs without a strictly lower validation loss.
    pub patience: usize,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        TrainSchedule {
            max_epochs: 200,
            patience: 10,
            clip_norm: Some(5.0),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    /// 1-based epoch whose weights were restored.
    pub best_epoch: usize,
    pub best_val_loss: f64,
}

impl TrainHistory {
    pub fn write_csv<W: Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "epoch,train_loss,val_loss")?;
        for e in &self.epochs {
            writeln!(w, "{},{},{}", e.epoch, e.train_loss, e.val_loss)?;
        }
        Ok(())
    }
}

/// Checks that every stop's windows target the same services in the same order.
pub fn check_aligned(windows: &[WindowedDataset]) -> Result<usize> {
    let first = windows.first().ok_or(ModelError::EmptyDataset)?;
    let n = first.len();
    let lookback = first.lookback;
    for w in &windows[1..] {
        if w.len() != n || w.lookback != lookback {
            return Err(ModelError::MisalignedBatches);
        }
        if (0..n).any(|i| w.target_key(i) != first.target_key(i)) {
            return Err(ModelError::MisalignedBatches);
        }
    }
    Ok(n)
}

/// Per-branch inputs and the B x n_stops scaled target matrix for `indices`.
pub fn gather_batch(windows: &[WindowedDataset], indices: &[usize]) -> (Vec<Array3<f64>>, Array2<f64>) {
    let xs = windows.iter().map(|w| w.gather(indices)).collect();
    let y = Array2::from_shape_fn((indices.len(), windows.len()), |(b, k)| windows[k].scaled_target(indices[b]));
    (xs, y)
}

/// Mean squared error in scaled units over all windows and outputs.
pub fn evaluate_loss(model: &MultiBranchLstm, windows: &[WindowedDataset]) -> Result<f64> {
    let n = check_aligned(windows)?;
    if n == 0 {
        return Err(ModelError::EmptyDataset);
    }
    let all: Vec<usize> = (0..n).collect();
    let mut total = 0.0;
    for chunk in all.chunks(EVAL_CHUNK) {
        let (xs, y) = gather_batch(windows, chunk);
        let pred = model.forward(&xs)?;
        let (loss, _) = mse_loss(&pred, &y)?;
        total += loss * chunk.len() as f64;
    }
    Ok(total / n as f64)
}

/// Mini-batch training with seeded shuffling and early stopping; returns the
/// weights from the epoch with the lowest validation loss.
pub fn train(
    mut model: MultiBranchLstm,
    train_windows: &[WindowedDataset],
    val_windows: &[WindowedDataset],
    hp: &HyperParams,
    schedule: &TrainSchedule,
    seed: u64,
) -> Result<(MultiBranchLstm, TrainHistory)> {
    hp.validate().map_err(ModelError::InvalidHyperParams)?;
    let n = check_aligned(train_windows)?;
    let n_val = check_aligned(val_windows)?;
    if n == 0 || n_val == 0 {
        return Err(ModelError::EmptyDataset);
    }
    if train_windows.len() != model.n_branches() || val_windows.len() != model.n_branches() {
        return Err(ModelError::MisalignedBatches);
    }

    let mut opt = Optimizer::new(hp.optimizer, hp.learning_rate)?;
    let mut rng = rng_from_seed(seed);
    let mut order: Vec<usize> = (0..n).collect();
    let mut best = model.clone();
    let mut best_val = f64::INFINITY;
    let mut best_epoch = 0;
    let mut epochs = Vec::new();

    for epoch in 1..=schedule.max_epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for batch in order.chunks(hp.batch_size) {
            let (xs, y) = gather_batch(train_windows, batch);
            let (pred, cache) = model.forward_cached(&xs)?;
            let (loss, grad) = mse_loss(&pred, &y)?;
            if !loss.is_finite() {
                return Err(ModelError::DivergedTraining { epoch });
            }
            sum += loss * batch.len() as f64;
            let mut grads = model.backward(&cache, &grad)?;
            if let Some(max) = schedule.clip_norm {
                clip_global_norm(&mut grads.slices_mut(), max);
            }
            opt.step(&mut model, &grads)?;
        }
        let train_loss = sum / n as f64;
        let val_loss = evaluate_loss(&model, val_windows)?;
        if !val_loss.is_finite() || !train_loss.is_finite() {
            return Err(ModelError::DivergedTraining { epoch });
        }
        epochs.push(EpochStats {
            epoch,
            train_loss,
            val_loss,
        });
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best = model.clone();
        } else if epoch - best_epoch >= schedule.patience {
            break;
        }
    }

    Ok((
        best,
        TrainHistory {
            epochs,
            best_epoch,
            best_val_loss: best_val,
        },
    ))
}
