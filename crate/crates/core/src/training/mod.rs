//! Two-stage training: single-modal probes for the learnable branches, then
//! the multimodal model end to end. Early stopping watches validation loss;
//! the kept parameters are those of the epoch with the best validation F1.

mod model;
mod optim;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use model::{init_from_pretrained, Model, ModelGradients, ModelSpec};
pub use optim::AdamW;

use crate::encoders::FeatureBundle;
use crate::evaluation::{compute_metrics, EvalError, F1Average, MetricsReport};
use crate::fusion::{predict, FusionError};
use crate::tensor::{cross_entropy, Tensor};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("training data: {0}")]
    Data(String),
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("training diverged at epoch {epoch}, step {step}: {detail}")]
    Diverged { epoch: usize, step: usize, detail: String },
    #[error("incompatible checkpoint: {0}")]
    Incompatible(String),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Eval(#[from] EvalError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    SingleModalImage,
    SingleModalText,
    Multimodal,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub dropout: f64,
    pub seed: u64,
    pub weight_decay: f64,
    /// A validation loss counts as an improvement only if it beats the
    /// running minimum by more than this.
    pub loss_tolerance: f64,
    /// Average used for validation F1 and checkpoint selection.
    pub f1_average: F1Average,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let fail = |m: &str| Err(TrainError::Config(m.into()));
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate must be positive");
        }
        if self.batch_size == 0 {
            return fail("batch_size must be at least 1");
        }
        if self.max_epochs == 0 {
            return fail("max_epochs must be at least 1");
        }
        if self.patience == 0 {
            return fail("patience must be at least 1");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return fail("dropout must be in [0, 1)");
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return fail("weight_decay must be non-negative");
        }
        if !(self.loss_tolerance >= 0.0 && self.loss_tolerance.is_finite()) {
            return fail("loss_tolerance must be non-negative");
        }
        Ok(())
    }
}

/// Published hyperparameters for a stage and corpus (`mvsa` or `tumemo`).
pub fn default_config(stage: Stage, corpus: &str) -> Result<TrainConfig, TrainError> {
    let multimodal_lr = match corpus {
        "mvsa" => 5e-6,
        "tumemo" => 1e-5,
        other => return Err(TrainError::Config(format!("unknown corpus `{other}`"))),
    };
    let (learning_rate, batch_size, max_epochs) = match stage {
        Stage::SingleModalImage => (1e-4, 32, 20),
        Stage::SingleModalText => (5e-5, 64, 20),
        Stage::Multimodal => (multimodal_lr, 16, 30),
    };
    Ok(TrainConfig {
        stage,
        learning_rate,
        batch_size,
        max_epochs,
        patience: 3,
        dropout: 0.5,
        seed: 0,
        weight_decay: 0.01,
        loss_tolerance: 0.0,
        f1_average: F1Average::Weighted,
    })
}

/// True when each of the last `patience` losses failed to improve on the
/// minimum of everything before it.
pub fn should_stop(val_losses: &[f64], patience: usize) -> bool {
    should_stop_with_tolerance(val_losses, patience, 0.0)
}

pub fn should_stop_with_tolerance(val_losses: &[f64], patience: usize, tolerance: f64) -> bool {
    if patience == 0 || val_losses.len() <= patience {
        return false;
    }
    let mut best = f64::INFINITY;
    let mut stale = 0;
    for &loss in val_losses {
        if loss < best - tolerance {
            stale = 0;
        } else {
            stale += 1;
        }
        best = best.min(loss);
    }
    stale >= patience
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    /// 1-based.
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub val_f1: f64,
}

/// Epoch number (1-based) with the highest validation F1; earliest wins ties.
pub fn select_checkpoint(history: &[EpochRecord]) -> Option<usize> {
    let mut best: Option<&EpochRecord> = None;
    for r in history {
        if best.map_or(true, |b| r.val_f1 > b.val_f1) {
            best = Some(r);
        }
    }
    best.map(|r| r.epoch)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainResult {
    pub history: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub stopped_early: bool,
    /// Where the caller stored the best parameters, if anywhere.
    pub checkpoint: Option<String>,
}

impl TrainResult {
    pub fn best(&self) -> &EpochRecord {
        &self.history[self.best_epoch - 1]
    }
}

/// One labelled input.
#[derive(Debug, Clone, Copy)]
pub struct Example<'a> {
    pub bundle: &'a FeatureBundle,
    pub label: usize,
}

/// Eval-mode pass over `examples`.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub loss: f64,
    pub predictions: Vec<usize>,
    pub metrics: MetricsReport,
}

pub fn evaluate(model: &Model<f32>, examples: &[Example]) -> Result<Evaluation, TrainError> {
    let mut loss = 0.0;
    let mut predictions = Vec::with_capacity(examples.len());
    for ex in examples {
        let logits = model.forward(ex.bundle, None)?;
        let wide: Vec<f64> = logits.iter().map(|&v| v as f64).collect();
        loss += cross_entropy(&wide, ex.label).0;
        predictions.push(predict(&logits));
    }
    let labels: Vec<usize> = examples.iter().map(|e| e.label).collect();
    let metrics = compute_metrics(&predictions, &labels, model.classes())?;
    Ok(Evaluation {
        loss: loss / examples.len().max(1) as f64,
        predictions,
        metrics,
    })
}

// Independent streams derived from the run seed.
const SHUFFLE_STREAM: u64 = 1;
const DROPOUT_STREAM: u64 = 2;

fn epoch_rng(seed: u64, purpose: u64, epoch: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream((purpose << 32) | epoch as u64);
    rng
}

/// Trains `model` in place. On return the model holds the parameters of the
/// best epoch by validation F1.
pub fn train_stage(
    model: &mut Model<f32>,
    train: &[Example],
    val: &[Example],
    config: &TrainConfig,
) -> Result<TrainResult, TrainError> {
    config.validate()?;
    if train.is_empty() {
        return Err(TrainError::Data("empty training set".into()));
    }
    if val.is_empty() {
        return Err(TrainError::Data("empty validation set".into()));
    }
    let mut opt = AdamW::new(config.learning_rate, config.weight_decay);
    let mut history: Vec<EpochRecord> = Vec::new();
    let mut best: Option<(f64, Vec<Tensor<f32>>)> = None;
    let mut val_losses = Vec::new();
    let mut stopped_early = false;
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut grads: Vec<Tensor<f32>> = model.params().into_iter().map(Tensor::zeros_like).collect();

    for epoch in 1..=config.max_epochs {
        order.sort_unstable();
        order.shuffle(&mut epoch_rng(config.seed, SHUFFLE_STREAM, epoch));
        let mut dropout = epoch_rng(config.seed, DROPOUT_STREAM, epoch);
        let mut train_loss = 0.0;
        for (step, batch) in order.chunks(config.batch_size).enumerate() {
            for t in grads.iter_mut() {
                t.data.fill(0.0);
            }
            for &i in batch {
                let ex = &train[i];
                let (loss, _) = model
                    .accumulate_backward(ex.bundle, ex.label, Some(&mut dropout), &mut grads)
                    .map_err(|e| TrainError::Diverged {
                        epoch,
                        step: step + 1,
                        detail: e.to_string(),
                    })?;
                train_loss += loss as f64;
            }
            if let Some(t) = grads.iter().find(|t| t.data.iter().any(|v| !v.is_finite())) {
                return Err(TrainError::Diverged {
                    epoch,
                    step: step + 1,
                    detail: format!("gradient of `{}` is not finite", t.name),
                });
            }
            crate::tensor::scale_all(&mut grads, 1.0 / batch.len() as f32);
            opt.step(model.params_mut(), &grads);
            if model.params().iter().any(|t| t.data.iter().any(|v| !v.is_finite())) {
                return Err(TrainError::Diverged {
                    epoch,
                    step: step + 1,
                    detail: "parameters became non-finite".into(),
                });
            }
        }
        let eval = evaluate(model, val)?;
        if !eval.loss.is_finite() {
            return Err(TrainError::Diverged {
                epoch,
                step: 0,
                detail: "validation loss is not finite".into(),
            });
        }
        let record = EpochRecord {
            epoch,
            train_loss: train_loss / train.len() as f64,
            val_loss: eval.loss,
            val_accuracy: eval.metrics.accuracy,
            val_f1: eval.metrics.f1(config.f1_average),
        };
        log::info!(
            "epoch {epoch}: train_loss {:.4} val_loss {:.4} val_acc {:.4} val_f1 {:.4}",
            record.train_loss,
            record.val_loss,
            record.val_accuracy,
            record.val_f1
        );
        if best.as_ref().map_or(true, |(f1, _)| record.val_f1 > *f1) {
            best = Some((record.val_f1, model.snapshot()));
        }
        val_losses.push(record.val_loss);
        history.push(record);
        if should_stop_with_tolerance(&val_losses, config.patience, config.loss_tolerance) {
            stopped_early = epoch < config.max_epochs;
            break;
        }
    }
    let best_epoch = select_checkpoint(&history).expect("at least one epoch");
    let (_, params) = best.expect("at least one epoch");
    model.set_params(&params);
    Ok(TrainResult {
        history,
        best_epoch,
        stopped_early,
        checkpoint: None,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn stop_rule_examples() {
        let traj = [1.0, 0.9, 0.91, 0.92, 0.93];
        let first = (1..=traj.len()).find(|&n| should_stop(&traj[..n], 3));
        assert_eq!(first, Some(5));
        assert!(!should_stop(&[1.0, 0.9, 0.8], 3));
        let flat = [1.0; 4];
        assert_eq!((1..=4).find(|&n| should_stop(&flat[..n], 3)), Some(4));
        // A late improvement resets the counter.
        assert!(!should_stop(&[1.0, 1.1, 1.2, 0.5], 3));
        assert!(should_stop_with_tolerance(&[1.0, 0.999, 0.998, 0.997], 3, 0.01));
    }

    #[test]
    fn checkpoint_selection() {
        let rec = |epoch, val_f1| EpochRecord {
            epoch,
            train_loss: 0.0,
            val_loss: 0.0,
            val_accuracy: 0.0,
            val_f1,
        };
        assert_eq!(select_checkpoint(&[rec(1, 0.5), rec(2, 0.7), rec(3, 0.6)]), Some(2));
        assert_eq!(select_checkpoint(&[rec(1, 0.6), rec(2, 0.6)]), Some(1));
        assert_eq!(select_checkpoint(&[rec(1, 0.1)]), Some(1));
        assert_eq!(select_checkpoint(&[]), None);
    }

    #[test]
    fn defaults() {
        let c = default_config(Stage::Multimodal, "mvsa").unwrap();
        assert_eq!((c.learning_rate, c.batch_size, c.max_epochs, c.patience, c.dropout), (5e-6, 16, 30, 3, 0.5));
        assert_eq!(default_config(Stage::Multimodal, "tumemo").unwrap().learning_rate, 1e-5);
        let i = default_config(Stage::SingleModalImage, "mvsa").unwrap();
        assert_eq!((i.learning_rate, i.batch_size, i.max_epochs), (1e-4, 32, 20));
        let t = default_config(Stage::SingleModalText, "tumemo").unwrap();
        assert_eq!((t.learning_rate, t.batch_size, t.max_epochs), (5e-5, 64, 20));
        assert!(default_config(Stage::Multimodal, "imdb").is_err());
    }
}
