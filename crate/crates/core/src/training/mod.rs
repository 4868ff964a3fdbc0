//! Loss, optimizers, the training loop and checkpoints.

mod checkpoint;
mod optim;

pub use checkpoint::{sha256_hex, Checkpoint, OptimizerSnapshot};
pub use optim::{Algo, OptimConfig, OptimizerState};

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::autodiff::Mode;
use crate::ctensor::{Real, Rng, Tensor};
use crate::data::{DatasetHandle, Split};
use crate::encodings::{scale_items, RangeSpec};
use crate::evaluation::evaluate_accuracy;
use crate::models::ModelGraph;
use crate::{CdsError, Result};

/// Mean cross-entropy of `[N, K]` logits and its gradient
/// `(softmax − onehot)/N`.
pub fn cross_entropy_logits<T: Real>(logits: &Tensor<T>, labels: &[usize]) -> Result<(f64, Tensor<T>)> {
    let &[n, k] = logits.shape() else {
        return Err(CdsError::shape(format!("logits must be [N, K], got {:?}", logits.shape())));
    };
    if labels.len() != n || n == 0 {
        return Err(CdsError::shape(format!("{} labels for {n} rows", labels.len())));
    }
    if let Some(l) = labels.iter().find(|&&l| l >= k) {
        return Err(CdsError::Parameter(format!("label {l} outside 0..{k}")));
    }
    let mut grad = vec![T::zero(); n * k];
    let mut total = 0.0;
    let inv_n = 1.0 / n as f64;
    for (i, row) in logits.data().chunks(k).enumerate() {
        let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.as_f64()));
        let exps: Vec<f64> = row.iter().map(|v| (v.as_f64() - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        total += sum.ln() + max - row[labels[i]].as_f64();
        for j in 0..k {
            let onehot = if j == labels[i] { 1.0 } else { 0.0 };
            grad[i * k + j] = T::lit((exps[j] / sum - onehot) * inv_n);
        }
    }
    Ok((total * inv_n, Tensor::from_vec(&[n, k], grad)?))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub validate_every: usize,
    pub optimizer: OptimConfig,
    /// Seeds the per-epoch shuffles and the augmentation draws.
    pub seed: u64,
    /// Random complex scaling applied to every training image.
    #[serde(default)]
    pub augment: Option<RangeSpec>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { steps: 50_000, batch_size: 256, validate_every: 1000, optimizer: OptimConfig::default(), seed: 0, augment: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub step: usize,
    pub split: Split,
    pub metric: String,
    pub value: f64,
}

impl MetricRecord {
    pub fn csv_row(&self) -> String {
        format!("{},{},{},{}\n", self.step, self.split, self.metric, self.value)
    }
}

pub const METRICS_HEADER: &str = "step,split,metric,value\n";

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Checkpoint with the highest validation accuracy (the initialization
    /// checkpoint when no validation ran).
    pub best: Checkpoint,
    pub best_val_accuracy: Option<f64>,
    /// Checkpoint of the last completed validation.
    pub last: Checkpoint,
    pub history: Vec<MetricRecord>,
    pub steps_run: usize,
    /// Set when training stopped on a non-finite loss or gradient.
    pub divergence: Option<String>,
}

const AUGMENT_STREAM: u64 = 0x4155_4721;

/// Runs `config.steps` optimizer steps over shuffled epochs of `train`,
/// validating on `val` every `config.validate_every` steps and after the last
/// step. Metrics are written to `metrics` as CSV.
pub fn train_loop<T: Real>(
    model: &mut ModelGraph<T>,
    train: &DatasetHandle,
    val: &DatasetHandle,
    config: &TrainConfig,
    metrics: &mut dyn Write,
) -> Result<TrainOutcome> {
    config.optimizer.validate()?;
    if config.batch_size == 0 || config.validate_every == 0 {
        return Err(CdsError::Config("batch_size and validate_every must be positive".into()));
    }
    if train.is_empty() || val.is_empty() {
        return Err(CdsError::Config("training and validation splits must be non-empty".into()));
    }
    if train.num_classes != model.config.num_classes || train.channels() != model.config.in_channels {
        return Err(CdsError::Config(format!(
            "dataset ({} classes, {} channels) does not fit the model ({} classes, {} channels)",
            train.num_classes,
            train.channels(),
            model.config.num_classes,
            model.config.in_channels
        )));
    }
    let mut csv = String::from(METRICS_HEADER);
    metrics.write_all(METRICS_HEADER.as_bytes())?;
    let mut opt = OptimizerState::<T>::new(config.optimizer);
    let init = Checkpoint::capture(model, Some(&opt), 0, &sha256_hex(csv.as_bytes()));
    let mut outcome = TrainOutcome {
        best: init.clone(),
        best_val_accuracy: None,
        last: init,
        history: Vec::new(),
        steps_run: 0,
        divergence: None,
    };
    let train = train.clone().with_seed(config.seed);
    let mut epoch = 0;
    let mut batches = train.batches::<T>(config.batch_size, epoch)?;
    let (mut loss_sum, mut loss_count) = (0.0, 0usize);
    for step in 1..=config.steps {
        let mut batch = match batches.next() {
            Some(b) => b?,
            None => {
                epoch += 1;
                batches = train.batches::<T>(config.batch_size, epoch)?;
                batches.next().expect("non-empty split")?
            }
        };
        if let Some(range) = &config.augment {
            let mut rng = Rng::stream(config.seed ^ AUGMENT_STREAM, step as u64);
            let scales: Vec<_> = (0..batch.len()).map(|_| range.sample(&mut rng)).collect();
            scale_items(&mut batch.inputs, &scales)?;
        }
        model.zero_grad();
        let (logits, tape) = model.forward(&batch.inputs, Mode::Train)?;
        let (loss, grad) = cross_entropy_logits(&logits, &batch.labels)?;
        if !loss.is_finite() {
            outcome.divergence = Some(format!("non-finite loss at step {step}"));
            break;
        }
        model.backward(&tape, &grad)?;
        match opt.step(model.params_mut()) {
            Err(CdsError::Divergence { reason, .. }) => {
                outcome.divergence = Some(format!("step {step}: {reason}"));
                break;
            }
            r => r?,
        }
        outcome.steps_run = step;
        loss_sum += loss;
        loss_count += 1;
        if step % config.validate_every == 0 || step == config.steps {
            let acc = evaluate_accuracy(model, val, config.batch_size)?;
            let rows = [
                MetricRecord { step, split: Split::Train, metric: "loss".into(), value: loss_sum / loss_count as f64 },
                MetricRecord { step, split: Split::Val, metric: "accuracy".into(), value: acc },
            ];
            for r in rows {
                let line = r.csv_row();
                metrics.write_all(line.as_bytes())?;
                csv.push_str(&line);
                outcome.history.push(r);
            }
            metrics.flush()?;
            log::info!("step {step}: train loss {:.4}, val accuracy {acc:.4}", loss_sum / loss_count as f64);
            loss_sum = 0.0;
            loss_count = 0;
            let ck = Checkpoint::capture(model, Some(&opt), step as u64, &sha256_hex(csv.as_bytes()));
            if outcome.best_val_accuracy.is_none_or(|b| acc > b) {
                outcome.best = ck.clone();
                outcome.best_val_accuracy = Some(acc);
            }
            outcome.last = ck;
        }
    }
    Ok(outcome)
}
