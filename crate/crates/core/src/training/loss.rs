//! Label smoothing, class weighting and the training objective.

use crate::autodiff::{Tape, Tensor, Var};
use crate::dataset::{TrialLabels, NUM_CATEGORIES, NUM_CLASSES};
use crate::model::{ParamStore, SegmentAveraging, TrialForward};
use crate::scalar::Scalar;

use super::TrainError;

/// Target distribution for OSATS score `y` (1-based): `1 - smoothing` on the
/// true class, the rest split evenly over the other classes.
pub fn smooth_labels(y: u8, smoothing: f64) -> Result<[f64; NUM_CLASSES], TrainError> {
    if !(1..=NUM_CLASSES as u8).contains(&y) {
        return Err(TrainError::Range(format!("label {y} outside 1..={NUM_CLASSES}")));
    }
    if !(0.0..1.0).contains(&smoothing) {
        return Err(TrainError::Range(format!("smoothing {smoothing} outside [0, 1)")));
    }
    let off = smoothing / (NUM_CLASSES - 1) as f64;
    let mut q = [off; NUM_CLASSES];
    q[y as usize - 1] = 1.0 - smoothing;
    Ok(q)
}

/// `total / (K * count_k)` for each of the `K = counts.len()` classes; classes
/// with no examples get the largest weight among present classes.
pub fn balanced_weights(counts: &[usize]) -> Vec<f64> {
    let total: usize = counts.iter().sum();
    let k = counts.len() as f64;
    let present: Vec<Option<f64>> = counts
        .iter()
        .map(|&c| (c > 0).then(|| total as f64 / (k * c as f64)))
        .collect();
    let max = present.iter().flatten().copied().fold(f64::NAN, f64::max);
    let fill = if max.is_nan() { 1.0 } else { max };
    present.into_iter().map(|w| w.unwrap_or(fill)).collect()
}

/// Cross-entropy class weights, one vector per OSATS category.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassWeights(pub Vec<[f64; NUM_CLASSES]>);

impl ClassWeights {
    pub fn uniform() -> Self {
        Self(vec![[1.0; NUM_CLASSES]; NUM_CATEGORIES])
    }

    pub fn category(&self, n: usize) -> &[f64; NUM_CLASSES] {
        &self.0[n]
    }
}

/// Class weights from the labels of a training fold.
pub fn class_weights(labels: &[TrialLabels]) -> Result<ClassWeights, TrainError> {
    if labels.is_empty() {
        return Err(TrainError::EmptyFold);
    }
    let weights = (0..NUM_CATEGORIES)
        .map(|n| {
            let mut counts = [0usize; NUM_CLASSES];
            for l in labels {
                counts[l.osats()[n] as usize - 1] += 1;
            }
            let w = balanced_weights(&counts);
            std::array::from_fn(|k| w[k])
        })
        .collect();
    Ok(ClassWeights(weights))
}

/// Objective hyperparameters shared by the tape and value-level losses.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossSpec<'a> {
    pub weights: &'a ClassWeights,
    pub smoothing: f64,
    pub averaging: SegmentAveraging,
}

/// `-sum_k w_k q_k log p_k` for one category, where `p` is the softmax of the
/// averaged logits (or the averaged probabilities themselves).
fn category_ce<T: Scalar>(
    tape: &mut Tape<T>,
    averaged: Var,
    coeffs: &[f64],
    averaging: SegmentAveraging,
) -> Result<Var, TrainError> {
    let logp = match averaging {
        SegmentAveraging::Logits => tape.log_softmax(averaged, 1)?,
        SegmentAveraging::Probabilities => tape.ln(averaged),
    };
    let c = Tensor::new(tape.shape(logp).to_vec(), coeffs.iter().map(|&v| T::lit(v)).collect())?;
    let weighted = tape.mul_const(logp, &c)?;
    let total = tape.sum(weighted);
    Ok(tape.scale(total, -T::one()))
}

/// Sum over categories of the weighted, smoothed cross-entropy of one trial.
pub fn trial_loss<T: Scalar>(
    tape: &mut Tape<T>,
    trial: &TrialForward,
    labels: &TrialLabels,
    spec: &LossSpec,
) -> Result<Var, TrainError> {
    let mut total: Option<Var> = None;
    for (n, &avg) in trial.averaged.iter().enumerate() {
        let q = smooth_labels(labels.osats()[n], spec.smoothing)?;
        let w = spec.weights.category(n);
        let coeffs: Vec<f64> = q.iter().zip(w).map(|(a, b)| a * b).collect();
        let ce = category_ce(tape, avg, &coeffs, spec.averaging)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, ce)?,
            None => ce,
        });
    }
    total.ok_or(TrainError::Range("no category outputs".into()))
}

/// `sum of squared values` over every parameter tensor.
pub fn l2_penalty<T: Scalar>(tape: &mut Tape<T>, params: &[Var]) -> Result<Var, TrainError> {
    let mut total: Option<Var> = None;
    for &p in params {
        let sq = tape.sum_squares(p);
        total = Some(match total {
            Some(acc) => tape.add(acc, sq)?,
            None => sq,
        });
    }
    total.ok_or(TrainError::Range("no parameters".into()))
}

/// Value-level objective for one trial: category cross-entropies on the
/// averaged outputs (`[category][class]`) plus `lambda` times the squared norm of `params`.
pub fn compute_loss<T: Scalar>(
    averaged: &[Vec<T>],
    labels: &TrialLabels,
    params: &ParamStore<T>,
    lambda: f64,
    spec: &LossSpec,
) -> Result<T, TrainError> {
    if averaged.len() != NUM_CATEGORIES || averaged.iter().any(|r| r.len() != NUM_CLASSES) {
        return Err(TrainError::ShapeMismatch(format!(
            "expected {NUM_CATEGORIES} x {NUM_CLASSES} outputs"
        )));
    }
    let mut tape = Tape::new();
    let avg: Vec<Var> = averaged
        .iter()
        .map(|row| tape.constant(Tensor::new(vec![1, NUM_CLASSES], row.clone()).expect("row shape")))
        .collect();
    let trial = TrialForward {
        segment_logits: avg.clone(),
        averaged: avg,
    };
    let ce = trial_loss(&mut tape, &trial, labels, spec)?;
    let p: Vec<Var> = params.tensors().iter().map(|t| tape.constant(t.clone())).collect();
    let l2 = l2_penalty(&mut tape, &p)?;
    let l2 = tape.scale(l2, T::lit(lambda));
    let loss = tape.add(ce, l2)?;
    Ok(tape.value(loss).item())
}

/// Mini-batch objective on a tape: mean per-trial loss plus the L2 term.
pub fn batch_loss<T: Scalar>(
    tape: &mut Tape<T>,
    params: &[Var],
    trials: &[TrialForward],
    labels: &[TrialLabels],
    lambda: f64,
    spec: &LossSpec,
) -> Result<Var, TrainError> {
    let mut total: Option<Var> = None;
    for (t, l) in trials.iter().zip(labels) {
        let loss = trial_loss(tape, t, l, spec)?;
        total = Some(match total {
            Some(acc) => tape.add(acc, loss)?,
            None => loss,
        });
    }
    let total = total.ok_or(TrainError::EmptyFold)?;
    let mean = tape.scale(total, T::one() / T::from_usize(trials.len()).unwrap());
    if lambda == 0.0 {
        return Ok(mean);
    }
    let l2 = l2_penalty(tape, params)?;
    let l2 = tape.scale(l2, T::lit(lambda));
    Ok(tape.add(mean, l2)?)
}
