//! Mini-batch Adam training with early stopping on validation loss.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::data::PrescriptionRecord;
use crate::error::{Error, Result};
use crate::heads::{ClassWeights, TaskWeights};
use crate::model::{Model, ModelSpec};
use crate::optim::{adam_step, AdamConfig, AdamState};
use crate::rng::{mix_seed, stream_rng, Stream};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub max_epochs: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub class_weights: Option<ClassWeights>,
    /// Stop as soon as the validation loss falls below this value.
    pub target_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            max_epochs: 100,
            patience: 5,
            batch_size: 8,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            class_weights: None,
            target_loss: None,
        }
    }
}

impl TrainConfig {
    pub fn adam(&self, lr: f64) -> AdamConfig {
        AdamConfig {
            lr,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }
}

/// Hyperparameters chosen from the grid for one run.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPoint {
    pub lr: f64,
    pub weights: TaskWeights,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the lowest validation loss.
    pub model: Model,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub history: Vec<EpochRecord>,
}

pub fn train_model(
    train: &[PrescriptionRecord],
    val: &[PrescriptionRecord],
    spec: &ModelSpec,
    point: &GridPoint,
    seed: u64,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::Data("training and validation sets must be non-empty".into()));
    }
    if cfg.batch_size == 0 || cfg.max_epochs == 0 {
        return Err(Error::Config("batch_size and max_epochs must be >= 1".into()));
    }
    let mut model = Model::init(spec, seed)?;
    let mut state = AdamState::new(&model.store);
    let adam = cfg.adam(point.lr);
    let mut shuffle_rng = stream_rng(seed, Stream::Shuffle);
    let mut dropout_rng = stream_rng(mix_seed(&[seed, point.lr.to_bits()]), Stream::Dropout);
    let class_weights = cfg.class_weights.as_ref();

    let mut best = model.clone();
    let mut best_val = model.mean_loss(val, &point.weights)?;
    let mut best_epoch = 0;
    let mut history = Vec::new();
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut step = 0;

    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut shuffle_rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<&PrescriptionRecord> = chunk.iter().map(|&i| &train[i]).collect();
            let loss = model.batch_loss(
                &batch,
                &point.weights,
                class_weights,
                true,
                true,
                &mut dropout_rng,
            )?;
            step += 1;
            if !loss.is_finite() {
                return Err(Error::Divergence { epoch, step, loss });
            }
            adam_step(&mut model.store, &mut state, &adam)?;
            epoch_loss += loss * batch.len() as f64;
        }
        let val_loss = model.mean_loss(val, &point.weights)?;
        if !val_loss.is_finite() {
            return Err(Error::Divergence {
                epoch,
                step,
                loss: val_loss,
            });
        }
        history.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / train.len() as f64,
            val_loss,
        });
        if val_loss < best_val {
            best_val = val_loss;
            best_epoch = epoch;
            best = model.clone();
        } else if epoch - best_epoch >= cfg.patience {
            break;
        }
        if cfg.target_loss.is_some_and(|t| val_loss < t) {
            break;
        }
    }
    best.store.zero_grads();
    Ok(TrainOutcome {
        model: best,
        best_epoch,
        best_val_loss: best_val,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synth_dataset, SynthSpec};
    use crate::encoder::SteConfig;
    use crate::model::Variant;

    fn small() -> (Vec<PrescriptionRecord>, ModelSpec) {
        let recs = synth_dataset(12, 4, &SynthSpec::default()).unwrap();
        (recs, ModelSpec::new(Variant::Ste, &SteConfig::toy()))
    }

    #[test]
    fn zero_lr_keeps_parameters() {
        let (recs, spec) = small();
        let cfg = TrainConfig {
            max_epochs: 3,
            patience: 10,
            ..TrainConfig::default()
        };
        let point = GridPoint {
            lr: 0.0,
            weights: TaskWeights::uniform(),
        };
        let out = train_model(&recs[..8], &recs[8..], &spec, &point, 5, &cfg).unwrap();
        let fresh = Model::init(&spec, 5).unwrap();
        assert_eq!(out.model.store, fresh.store);
        assert_eq!(out.history.len(), 3);
    }

    #[test]
    fn training_is_deterministic() {
        let (recs, spec) = small();
        let cfg = TrainConfig {
            max_epochs: 4,
            ..TrainConfig::default()
        };
        let point = GridPoint {
            lr: 1e-2,
            weights: TaskWeights::uniform(),
        };
        let a = train_model(&recs[..8], &recs[8..], &spec, &point, 1, &cfg).unwrap();
        let b = train_model(&recs[..8], &recs[8..], &spec, &point, 1, &cfg).unwrap();
        assert_eq!(a.model.store, b.model.store);
        assert_eq!(a.history, b.history);
    }

    #[test]
    fn best_epoch_has_minimal_validation_loss() {
        let (recs, spec) = small();
        let cfg = TrainConfig {
            max_epochs: 12,
            patience: 3,
            ..TrainConfig::default()
        };
        let point = GridPoint {
            lr: 3e-2,
            weights: TaskWeights::uniform(),
        };
        let out = train_model(&recs[..8], &recs[8..], &spec, &point, 2, &cfg).unwrap();
        let min = out
            .history
            .iter()
            .map(|e| e.val_loss)
            .fold(f64::INFINITY, f64::min);
        if out.best_epoch > 0 {
            assert_eq!(out.history[out.best_epoch - 1].val_loss, min);
        } else {
            assert!(out.best_val_loss <= min);
        }
        let reloaded = out.model.mean_loss(&recs[8..], &point.weights).unwrap();
        assert_eq!(reloaded, out.best_val_loss);
    }

    #[test]
    fn empty_split_rejected() {
        let (recs, spec) = small();
        let point = GridPoint {
            lr: 1e-3,
            weights: TaskWeights::uniform(),
        };
        assert!(train_model(&recs, &[], &spec, &point, 0, &TrainConfig::default()).is_err());
    }
}
