//! The per-stage training loop and evaluation.

use serde::{Deserialize, Serialize};

use crate::compute::{softmax_cross_entropy, OptimizerState, SgdConfig, Tensor};
use crate::data::{batches, Dataset};
use crate::mask::ChannelMask;
use crate::model::ModelGraph;
use crate::sparsity::{GammaSnapshot, GradientNormLog, SparsityConfig, TrackedChannel};
use crate::Result;

/// Optimizer and loop settings shared by every training stage of a plan.
#[derive(Debug, Clone, PartialEq)]
pub struct LoopSettings {
    pub batch_size: usize,
    pub eval_batch_size: usize,
    pub momentum: f64,
    pub weight_decay: f64,
    pub nesterov: bool,
    pub augment: bool,
}

/// One line of a metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub stage: String,
    pub epoch: usize,
    pub lr: f64,
    /// Mean task loss over the epoch's batches.
    pub train_loss: f64,
    /// Regularizer value after the last step.
    pub penalty: f64,
    pub train_top1: f64,
    pub test_top1: f64,
    pub gamma_median: f32,
}

/// Mean `|∂L/∂γ|` of every channel over one epoch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradientRecord {
    pub stage: String,
    pub epoch: usize,
    pub layers: Vec<(String, Vec<f32>)>,
}

/// Everything a training loop observed.
#[derive(Debug, Clone, Default)]
pub struct LoopOutput {
    pub epochs: Vec<EpochRecord>,
    /// `|γ|` after every epoch.
    pub snapshots: Vec<GammaSnapshot>,
    pub gradients: Vec<GradientRecord>,
}

/// Percent of `data` classified correctly in eval mode.
pub fn evaluate(model: &ModelGraph, data: &Dataset, eval_batch_size: usize) -> Result<f64> {
    let mut correct = 0usize;
    for (x, y) in batches(data, eval_batch_size, None, 0, false) {
        let logits = model.predict(&x)?;
        correct += count_correct(&logits, &y);
    }
    Ok(100.0 * correct as f64 / data.len().max(1) as f64)
}

fn count_correct(logits: &Tensor, labels: &[usize]) -> usize {
    let k = logits.shape()[1];
    logits
        .data()
        .chunks(k)
        .zip(labels)
        .filter(|(row, &y)| argmax(row) == y)
        .count()
}

fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub(crate) struct TrainJob<'a> {
    pub stage: &'a str,
    pub epochs: usize,
    pub lr_at: &'a dyn Fn(usize) -> f64,
    pub sparsity: SparsityConfig,
    pub mask: Option<&'a ChannelMask>,
    pub shuffle_seed: u64,
}

/// Trains `model` in place.
pub(crate) fn train(
    model: &mut ModelGraph,
    train_set: &Dataset,
    test_set: &Dataset,
    settings: &LoopSettings,
    job: &TrainJob<'_>,
) -> Result<LoopOutput> {
    let mut opt = OptimizerState::new(SgdConfig {
        lr: (job.lr_at)(0),
        momentum: settings.momentum,
        weight_decay: settings.weight_decay,
        nesterov: settings.nesterov,
        dampening: 0.0,
    })?;
    job.sparsity.validate(job.mask)?;
    let tracked: Vec<TrackedChannel> = model
        .bn_layers()
        .into_iter()
        .flat_map(|layer| {
            let n = model.bn(layer).map_or(0, |s| s.channels());
            (0..n).map(move |channel| TrackedChannel { layer, channel })
        })
        .collect();
    let mut out = LoopOutput::default();
    for epoch in 0..job.epochs {
        let lr = (job.lr_at)(epoch);
        opt.set_lr(lr)?;
        let mut grad_log = GradientNormLog::new(model, tracked.clone(), None)?;
        let (mut loss_sum, mut correct, mut seen) = (0.0f64, 0usize, 0usize);
        let mut penalty_value = 0.0;
        for (x, y) in batches(train_set, settings.batch_size, Some(job.shuffle_seed), epoch as u64, settings.augment) {
            let trace = model.forward(&x, true)?;
            let (loss, grad_logits) = softmax_cross_entropy(trace.logits(), &y)?;
            correct += count_correct(trace.logits(), &y);
            let mut grads = model.backward(&trace, &grad_logits)?;
            let penalty = job.sparsity.penalty(model, job.mask)?;
            penalty.add_to(&mut grads)?;
            penalty_value = penalty.loss();
            grad_log.record(&grads)?;
            model.sgd_step(&grads, &mut opt)?;
            loss_sum += loss as f64 * y.len() as f64;
            seen += y.len();
        }
        let snapshot = GammaSnapshot::capture(model, job.stage, epoch);
        let means = grad_log.means();
        let mut layers: Vec<(String, Vec<f32>)> = Vec::new();
        for (t, m) in tracked.iter().zip(means) {
            let name = &model.layers()[t.layer].name;
            match layers.last_mut() {
                Some((n, v)) if n == name => v.push(m),
                _ => layers.push((name.clone(), vec![m])),
            }
        }
        out.gradients.push(GradientRecord {
            stage: job.stage.into(),
            epoch,
            layers,
        });
        let record = EpochRecord {
            stage: job.stage.into(),
            epoch,
            lr,
            train_loss: loss_sum / seen.max(1) as f64,
            penalty: penalty_value,
            train_top1: 100.0 * correct as f64 / seen.max(1) as f64,
            test_top1: evaluate(model, test_set, settings.eval_batch_size)?,
            gamma_median: snapshot.median(),
        };
        log::info!(
            "{} epoch {}/{}: loss {:.4} train {:.2}% test {:.2}% median|γ| {:.4}",
            job.stage,
            epoch + 1,
            job.epochs,
            record.train_loss,
            record.train_top1,
            record.test_top1,
            record.gamma_median
        );
        out.epochs.push(record);
        out.snapshots.push(snapshot);
    }
    Ok(out)
}
