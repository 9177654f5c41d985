use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::FeatureMatrix;
use crate::models::{argmax_label, batch_tensor, Model};
use crate::nn::{AdamState, Graph, Mode};
use crate::rng::{self, tag};

use super::histogram::SampleResult;
use super::metrics::ConfusionMatrix;

/// Samples per forward pass when evaluating; only bounds memory.
const EVAL_CHUNK: usize = 256;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Epochs without a validation-loss improvement before stopping.
    pub patience: usize,
    pub seed: u64,
    /// Overrides the architecture's learning rate.
    pub lr: Option<f64>,
    /// Overrides the architecture's weight decay.
    pub weight_decay: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            max_epochs: 200,
            patience: 15,
            seed: 0,
            lr: None,
            weight_decay: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self, model: &Model) -> Result<()> {
        let min_batch = if model.config.uses_batch_norm() { 2 } else { 1 };
        if self.batch_size < min_batch {
            return Err(Error::InvalidConfig(format!(
                "batch size {} is below {min_batch} for {}",
                self.batch_size, model.name
            )));
        }
        if self.max_epochs == 0 {
            return Err(Error::InvalidConfig("max_epochs must be positive".into()));
        }
        for (name, v) in [("lr", self.lr), ("weight_decay", self.weight_decay)] {
            if v.is_some_and(|v| !(v.is_finite() && v >= 0.0)) {
                return Err(Error::InvalidConfig(format!("{name} must be a non-negative number")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Mean training cross-entropy over the epoch's batches, weighted by
    /// batch size, with dropout active.
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch whose parameters were kept.
    pub best_epoch: usize,
    pub stopped_early: bool,
}

/// Batch boundaries over `len` samples. A trailing batch of one sample is
/// folded into the previous one so batch norm always sees two samples.
fn batch_ranges(len: usize, batch_size: usize) -> Vec<(usize, usize)> {
    let mut ranges: Vec<(usize, usize)> = (0..len)
        .step_by(batch_size)
        .map(|s| (s, (s + batch_size).min(len)))
        .collect();
    if ranges.len() > 1 && ranges.last().is_some_and(|&(s, e)| e - s == 1) {
        let (_, e) = ranges.pop().expect("non-empty");
        ranges.last_mut().expect("non-empty").1 = e;
    }
    ranges
}

/// Mean cross-entropy and accuracy in eval mode.
pub fn eval_loss(model: &Model, data: &[FeatureMatrix]) -> Result<(f64, f64)> {
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    let (mut loss, mut correct) = (0.0, 0);
    for chunk in data.chunks(EVAL_CHUNK) {
        let items: Vec<&FeatureMatrix> = chunk.iter().collect();
        let logits = model.logits(&batch_tensor(&items)?)?;
        for (row, fm) in logits.data.chunks(3).zip(chunk) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[fm.label.index()];
            if argmax_label(row) == fm.label {
                correct += 1;
            }
        }
    }
    let n = data.len() as f64;
    Ok((loss / n, 100.0 * correct as f64 / n))
}

/// Fits `model` in place with Adam on cross-entropy. Every epoch reshuffles
/// the training set from its own keyed stream; the parameters (and
/// batch-norm running statistics) of the epoch with the lowest validation
/// loss are restored at the end. With an empty validation set the training
/// loss is monitored instead.
pub fn train(model: &mut Model, train: &[FeatureMatrix], val: &[FeatureMatrix], tc: &TrainConfig) -> Result<TrainHistory> {
    tc.validate(model)?;
    if train.is_empty() {
        return Err(Error::EmptyData);
    }
    let mut hyper = model.config.optimizer();
    if let Some(lr) = tc.lr {
        hyper.lr = lr;
    }
    if let Some(wd) = tc.weight_decay {
        hyper.weight_decay = wd;
    }
    let mut adam = AdamState::new(hyper, &model.params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut history = TrainHistory::default();
    let mut best = (f64::INFINITY, model.params.clone(), model.running.clone());
    let mut stale = 0;
    for epoch in 1..=tc.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut rng::stream(tc.seed, &[tag::SHUFFLE, epoch as u64]));
        let mut total = 0.0;
        for (b, (s, e)) in batch_ranges(order.len(), tc.batch_size).into_iter().enumerate() {
            let items: Vec<&FeatureMatrix> = order[s..e].iter().map(|&i| &train[i]).collect();
            let labels: Vec<usize> = items.iter().map(|fm| fm.label.index()).collect();
            let x = batch_tensor(&items)?;
            let mask_seed = rng::derive_seed(tc.seed, &[tag::DROPOUT, epoch as u64, b as u64]);
            let mut g = Graph::new();
            let mut drng = rng::stream(mask_seed, &[]);
            let f = model.forward_with(&mut g, &model.params, &x, Mode::Train, &mut drng)?;
            let loss_var = g.cross_entropy(f.logits, &labels)?;
            let loss = g.value(loss_var).data[0];
            if !loss.is_finite() {
                return Err(Error::Diverged(epoch));
            }
            total += loss * items.len() as f64;
            let grads = g.backward(loss_var)?.for_params(&model.params);
            adam.step(&mut model.params, &grads)?;
            model.update_running_stats(&f.batch_stats);
        }
        let train_loss = total / train.len() as f64;
        let (val_loss, val_acc) = if val.is_empty() {
            (train_loss, f64::NAN)
        } else {
            eval_loss(model, val)?
        };
        if !val_loss.is_finite() {
            return Err(Error::Diverged(epoch));
        }
        log::debug!("{} epoch {epoch}: train {train_loss:.4} val {val_loss:.4} acc {val_acc:.2}", model.name);
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_acc,
        });
        if val_loss < best.0 {
            best = (val_loss, model.params.clone(), model.running.clone());
            history.best_epoch = epoch;
            stale = 0;
        } else {
            stale += 1;
            if stale >= tc.patience {
                history.stopped_early = true;
                break;
            }
        }
    }
    model.params = best.1;
    model.running = best.2;
    Ok(history)
}

/// Per-sample outcomes in eval mode.
pub fn evaluate_samples(model: &Model, data: &[FeatureMatrix]) -> Result<Vec<SampleResult>> {
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.chunks(EVAL_CHUNK) {
        let items: Vec<&FeatureMatrix> = chunk.iter().collect();
        let predicted = model.predict(&batch_tensor(&items)?)?;
        out.extend(chunk.iter().zip(predicted).map(|(fm, p)| SampleResult {
            truth: fm.label,
            predicted: p,
            prediction_time_s: fm.prediction_time_s,
        }));
    }
    Ok(out)
}

pub fn confusion_of(results: &[SampleResult]) -> ConfusionMatrix {
    let mut cm = ConfusionMatrix::new();
    for r in results {
        cm.record(r.truth, r.predicted);
    }
    cm
}

pub fn evaluate(model: &Model, data: &[FeatureMatrix]) -> Result<ConfusionMatrix> {
    Ok(confusion_of(&evaluate_samples(model, data)?))
}
