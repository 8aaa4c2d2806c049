//! Optimization of the model: augmentation, weighted cross-entropy with L2, Adam.

mod adam;
mod augment;
mod loss;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, Tape, Tensor};
use crate::dataset::{segment, DatasetError, LabeledTrial, TrialLabels};
use crate::model::{Mode, ModelConfig, ModelError, RTrans};
use crate::scalar::Scalar;

pub use adam::{adam_step, AdamState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use augment::{add_noise, augment, flip, AugmentRecord};
pub use loss::{
    balanced_weights, batch_loss, class_weights, compute_loss, l2_penalty, smooth_labels, trial_loss, ClassWeights,
    LossSpec,
};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("value out of range: {0}")]
    Range(String),
    #[error("training fold is empty")]
    EmptyFold,
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("loss diverged at epoch {epoch}, batch {batch}: {detail}")]
    Diverged { epoch: usize, batch: usize, detail: String },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Tensor(#[from] AutodiffError),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub lambda_l2: f64,
    pub augment_rate: f64,
    pub label_smoothing: f64,
    /// Multiplier on the per-feature std used for the noise augmentation.
    pub noise_scale: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 1500,
            batch_size: 25,
            learning_rate: 1e-6,
            lambda_l2: 0.01,
            augment_rate: 0.5,
            label_smoothing: 0.3,
            noise_scale: 1.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |msg: String| Err(TrainError::Config(msg));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be at least 1".into());
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        if !(self.lambda_l2 >= 0.0 && self.lambda_l2.is_finite()) {
            return bad(format!("lambda_l2 must be non-negative, got {}", self.lambda_l2));
        }
        if !(0.0..=1.0).contains(&self.augment_rate) {
            return bad(format!("augment_rate must lie in [0, 1], got {}", self.augment_rate));
        }
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return bad(format!(
                "label_smoothing must lie in [0, 1), got {}",
                self.label_smoothing
            ));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return bad(format!("noise_scale must be non-negative, got {}", self.noise_scale));
        }
        Ok(())
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutput<T> {
    pub model: RTrans<T>,
    /// Mean training loss of each epoch.
    pub history: Vec<f64>,
}

/// Cuts a trial into model-ready `L x D` tensors.
pub fn segment_tensors<T: Scalar>(
    frames: &crate::dataset::Frames,
    trial_id: &str,
    config: &ModelConfig,
) -> Result<Vec<Tensor<T>>, TrainError> {
    if frames.width() != config.d_model {
        return Err(TrainError::ShapeMismatch(format!(
            "trial {trial_id} has {} features, model expects {}",
            frames.width(),
            config.d_model
        )));
    }
    Ok(segment(frames, trial_id, config.segment_len)?
        .iter()
        .map(|s| s.values.to_tensor())
        .collect())
}

/// Trains a freshly initialized model on `trials`.
pub fn train<T: Scalar>(
    trials: &[LabeledTrial],
    model_config: &ModelConfig,
    config: &TrainConfig,
) -> Result<TrainOutput<T>, TrainError> {
    train_with(trials, model_config, config, |_, _| {})
}

/// [`train`] with a callback receiving `(epoch, mean loss)` after every epoch.
///
/// Each epoch shuffles the trial order, augments every trial, and splits the
/// order into mini-batches. One tape covers a whole mini-batch so that the
/// head batchnorm layers normalize over every segment in it; the objective is
/// the mean per-trial loss plus the L2 term.
pub fn train_with<T: Scalar>(
    trials: &[LabeledTrial],
    model_config: &ModelConfig,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(usize, f64),
) -> Result<TrainOutput<T>, TrainError> {
    config.validate()?;
    if trials.is_empty() {
        return Err(TrainError::EmptyFold);
    }
    let mut model = RTrans::<T>::new(model_config.clone())?;
    let labels: Vec<TrialLabels> = trials.iter().map(|t| t.labels).collect();
    let weights = class_weights(&labels)?;
    let spec = LossSpec {
        weights: &weights,
        smoothing: config.label_smoothing,
        averaging: model_config.averaging,
    };
    let mut adam = AdamState::new(model.params().tensors());
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let lr = T::lit(config.learning_rate);
    let mut order: Vec<usize> = (0..trials.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);

    for epoch in 1..=config.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(config.batch_size).enumerate() {
            let mut inputs = Vec::with_capacity(batch.len());
            let mut batch_labels = Vec::with_capacity(batch.len());
            for &i in batch {
                let lt = &trials[i];
                let (frames, _) = augment(&lt.trial.frames, config.augment_rate, config.noise_scale, &mut rng);
                inputs.push(segment_tensors::<T>(&frames, lt.id(), model_config)?);
                batch_labels.push(lt.labels);
            }

            let mut tape = Tape::new();
            let p = model.bind(&mut tape, true);
            let forward = model.forward_batch(&mut tape, &p, &inputs, Mode::Train)?;
            let loss = batch_loss(&mut tape, &p, &forward.trials, &batch_labels, config.lambda_l2, &spec)?;
            let value = tape.value(loss).item().as_f64();
            let diverged = |detail: String| TrainError::Diverged {
                epoch,
                batch: b + 1,
                detail,
            };
            if !value.is_finite() {
                let node = tape.first_non_finite();
                return Err(diverged(format!("loss is {value}, first non-finite node {node:?}")));
            }
            model.update_running_stats(&tape, &forward);
            let mut grads = tape.backward(loss).map_err(|e| diverged(e.to_string()))?;
            let grads: Vec<Tensor<T>> = p.iter().map(|&v| grads.take(v).expect("parameter gradient")).collect();
            adam_step(model.params_mut().tensors_mut(), &grads, &mut adam, lr)?;
            epoch_loss += value * batch.len() as f64;
        }
        let mean = epoch_loss / trials.len() as f64;
        log::debug!("epoch {epoch}: loss {mean:.6}");
        on_epoch(epoch, mean);
        history.push(mean);
    }
    Ok(TrainOutput { model, history })
}
