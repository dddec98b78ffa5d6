//! SGD-with-momentum training loop. Deterministic for a fixed seed and
//! data order; keeps the parameters of the best validation epoch.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::data::{augment, AugmentConfig, LabeledDataset};
use crate::model::{batch_of, ModelError, SmallCnn};
use crate::rng::{derive_seed, seeded};
use crate::tensor::{Tape, Tensor};

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f32,
    pub momentum: f32,
    pub batch_size: usize,
    pub seed: u64,
    /// Applied to the training split only, re-sampled each epoch.
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            lr: 0.01,
            momentum: 0.9,
            batch_size: 16,
            seed: 0,
            augment: AugmentConfig::default(),
        }
    }
}

#[derive(Debug)]
pub enum TrainError {
    EmptyDataset(&'static str),
    /// Loss went NaN/Inf; training aborts with the failing position.
    NonFiniteLoss { epoch: usize, batch: usize, detail: String },
    Model(ModelError),
    Data(crate::data::DataError),
}

impl fmt::Display for TrainError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::EmptyDataset(which) => write!(f, "{which} dataset is empty"),
            Self::NonFiniteLoss { epoch, batch, detail } => {
                write!(f, "non-finite loss at epoch {epoch}, batch {batch}: {detail}")
            }
            Self::Model(e) => write!(f, "{e}"),
            Self::Data(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for TrainError {}

impl From<ModelError> for TrainError {
    fn from(e: ModelError) -> Self {
        TrainError::Model(e)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_accuracy: f64,
}

/// Fraction of correct predictions over a dataset.
pub fn accuracy(model: &SmallCnn, data: &LabeledDataset, batch_size: usize) -> Result<f64, ModelError> {
    let mut correct = 0usize;
    for chunk in data.items().chunks(batch_size.max(1)) {
        let (batch, labels) = batch_of(chunk).map_err(ModelError::Tensor)?;
        let preds = model.predict(&batch)?;
        correct += preds.iter().zip(&labels).filter(|(p, l)| p == l).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

/// Train in place. The model ends at the parameters of the epoch with the
/// best validation accuracy; `lr == 0` leaves parameters bit-identical.
pub fn train(
    model: &mut SmallCnn,
    train_set: &LabeledDataset,
    val_set: &LabeledDataset,
    config: &TrainConfig,
) -> Result<TrainHistory, TrainError> {
    if train_set.is_empty() {
        return Err(TrainError::EmptyDataset("train"));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptyDataset("validation"));
    }
    let batch_size = config.batch_size.max(1);
    let mut velocity: Vec<Vec<f32>> =
        model.params().iter().map(|t| vec![0.0f32; t.numel()]).collect();

    let mut best: Option<(usize, f64, Vec<Tensor>)> = None;
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        let mut order: Vec<usize> = (0..train_set.len()).collect();
        let mut shuffle_rng = seeded(derive_seed(config.seed, &format!("epoch{epoch}/order")));
        crate::rng::shuffle(&mut order, &mut shuffle_rng);
        let mut aug_rng = seeded(derive_seed(config.seed, &format!("epoch{epoch}/augment")));

        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        for (batch_idx, chunk) in order.chunks(batch_size).enumerate() {
            let items: Vec<(Tensor, usize)> = chunk
                .iter()
                .map(|&i| {
                    let (img, label) = &train_set.items()[i];
                    let img = augment(img, &config.augment, &mut aug_rng)
                        .map_err(TrainError::Data)?;
                    Ok((img, *label))
                })
                .collect::<Result<_, TrainError>>()?;
            let (batch, labels) = batch_of(&items).map_err(ModelError::Tensor)?;

            let mut tape = Tape::new();
            let x = tape.constant(&batch);
            let fwd = model.forward_on_tape(&mut tape, x)?;
            let loss = tape
                .cross_entropy_loss(fwd.logits, &labels)
                .map_err(|e| TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    detail: e.to_string(),
                })?;
            let loss_value = tape.data(loss)[0] as f64;
            if !loss_value.is_finite() {
                return Err(TrainError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    detail: format!("loss = {loss_value}"),
                });
            }
            loss_sum += loss_value * labels.len() as f64;
            correct += tape
                .tensor(fwd.logits)
                .argmax_rows()
                .map_err(ModelError::Tensor)?
                .iter()
                .zip(&labels)
                .filter(|(p, l)| p == l)
                .count();

            tape.backward(loss).map_err(ModelError::Tensor)?;
            if config.lr != 0.0 {
                apply_sgd(model, &tape, &fwd.params, config, &mut velocity);
            }
        }

        let val_accuracy = accuracy(model, val_set, batch_size)?;
        history.push(EpochStats {
            epoch,
            train_loss: loss_sum / train_set.len() as f64,
            train_accuracy: correct as f64 / train_set.len() as f64,
            val_accuracy,
        });
        let improved = best.as_ref().map(|(_, acc, _)| val_accuracy > *acc).unwrap_or(true);
        if improved {
            best = Some((epoch, val_accuracy, model.params().to_vec()));
        }
    }

    let (best_epoch, best_val_accuracy, best_params) = best.expect("at least one epoch");
    if config.epochs > 0 {
        model.set_params(best_params);
    }
    Ok(TrainHistory { epochs: history, best_epoch, best_val_accuracy })
}

fn apply_sgd(
    model: &mut SmallCnn,
    tape: &Tape,
    param_vals: &[crate::tensor::Val],
    config: &TrainConfig,
    velocity: &mut [Vec<f32>],
) {
    for ((param, vel), &val) in
        model.params_mut().iter_mut().zip(velocity.iter_mut()).zip(param_vals)
    {
        let grad = tape.grad(val).expect("parameter leaves receive gradients after backward");
        for ((p, v), &g) in param.data_mut().iter_mut().zip(vel.iter_mut()).zip(grad) {
            *v = config.momentum * *v + g;
            *p -= config.lr * *v;
        }
    }
}
