use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::Network;
use crate::data::{DatasetSplit, Sample};
use crate::ops::{adam_step, mse_loss, AdamState, Mode};
use crate::{NnError, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub patience: usize,
    pub seed: u64,
    /// Reload the weights of the best validation epoch when training ends.
    pub restore_best: bool,
}

impl Default for TrainSettings {
    fn default() -> Self {
        Self { learning_rate: 1e-3, epochs: 15, batch_size: 50, patience: 5, seed: 0, restore_best: true }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Index 0 is the evaluation before any update.
    pub train_mse: Vec<f64>,
    pub val_mse: Vec<f64>,
    pub epochs_run: usize,
    pub early_stopped: bool,
    pub diverged: bool,
    pub best_epoch: usize,
    pub best_val_mse: f64,
    pub weights_digest: String,
}

const EVAL_BATCH: usize = 50;

fn batch_tensor(samples: &[&Sample]) -> Result<Tensor, NnError> {
    let frames: Vec<Tensor> = samples.iter().map(|s| s.frames.clone()).collect();
    Tensor::stack(&frames)
}

/// Eval-mode forward pass, one angle per sample.
pub fn predict_angles(net: &Network, samples: &[Sample]) -> Result<Vec<f64>, NnError> {
    let mut out = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(EVAL_BATCH) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (p, _) = net.forward_stateless(&batch_tensor(&refs)?, Mode::Eval, 0)?;
        out.extend(p);
    }
    Ok(out)
}

fn eval_mse(net: &Network, samples: &[Sample]) -> Result<f64, NnError> {
    let pred = predict_angles(net, samples)?;
    let target: Vec<f64> = samples.iter().map(|s| s.label).collect();
    Ok(mse_loss(&pred, &target)?.0)
}

/// Mini-batches of `size`; a trailing singleton joins the previous batch so
/// batch statistics stay defined.
fn batches(order: &[usize], size: usize) -> Vec<&[usize]> {
    let mut out: Vec<&[usize]> = order.chunks(size).collect();
    if out.len() > 1 && out.last().is_some_and(|b| b.len() == 1) {
        out.pop();
        let start = order.len() - size - 1;
        let last = out.len() - 1;
        out[last] = &order[start..];
    }
    out
}

fn step_seed(seed: u64, epoch: usize, batch: usize) -> u64 {
    seed ^ ((epoch as u64) << 32 | batch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

/// Mini-batch Adam on the MSE loss with per-epoch seeded shuffling and
/// patience-based early stopping on validation MSE.
pub fn train(net: &mut Network, split: &DatasetSplit, settings: &TrainSettings) -> Result<TrainReport, NnError> {
    if split.train.is_empty() || split.validation.is_empty() {
        return Err(NnError::Data("training needs non-empty train and validation sets".into()));
    }
    if settings.batch_size == 0 {
        return Err(NnError::Config("batch size must be positive".into()));
    }
    let mut adam = AdamState::new(settings.learning_rate);
    let mut train_mse = vec![eval_mse(net, &split.train)?];
    let initial_val = eval_mse(net, &split.validation)?;
    let mut val_mse = vec![initial_val];
    let mut best = (0usize, initial_val, net.clone());
    let mut stale = 0;
    let mut early_stopped = false;
    let mut diverged = !initial_val.is_finite();
    let mut epochs_run = 0;

    let mut order: Vec<usize> = (0..split.train.len()).collect();
    'epochs: for epoch in 1..=settings.epochs {
        if diverged {
            break;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(settings.seed.wrapping_add(epoch as u64));
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (bi, idx) in batches(&order, settings.batch_size).into_iter().enumerate() {
            let samples: Vec<&Sample> = idx.iter().map(|&i| &split.train[i]).collect();
            let x = batch_tensor(&samples)?;
            let y: Vec<f64> = samples.iter().map(|s| s.label).collect();
            net.zero_grad();
            let (pred, cache) = net.forward(&x, Mode::Train, step_seed(settings.seed, epoch, bi))?;
            let (loss, grad) = mse_loss(&pred, &y)?;
            if !loss.is_finite() {
                diverged = true;
                break 'epochs;
            }
            net.backward(&cache, &grad)?;
            match adam_step(&mut net.params_mut(), &mut adam) {
                Ok(()) => {}
                Err(NnError::NonFinite(_)) => {
                    diverged = true;
                    break 'epochs;
                }
                Err(e) => return Err(e),
            }
            loss_sum += loss * idx.len() as f64;
        }
        epochs_run = epoch;
        train_mse.push(loss_sum / split.train.len() as f64);
        let val = eval_mse(net, &split.validation)?;
        val_mse.push(val);
        if !val.is_finite() {
            diverged = true;
            break;
        }
        if val < best.1 {
            best = (epoch, val, net.clone());
            stale = 0;
        } else {
            stale += 1;
            if stale >= settings.patience {
                early_stopped = true;
                break;
            }
        }
    }
    let (best_epoch, best_val_mse, best_net) = best;
    if settings.restore_best {
        *net = best_net;
    }
    Ok(TrainReport {
        train_mse,
        val_mse,
        epochs_run,
        early_stopped,
        diverged,
        best_epoch,
        best_val_mse,
        weights_digest: net.weights_digest(),
    })
}
