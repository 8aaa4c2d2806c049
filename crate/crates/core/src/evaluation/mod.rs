//! Trial-level predictions, rank correlation, cross-validation and report tables.

mod cv;
mod spearman;
mod tables;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{segment, DatasetError, KinematicTrial, NUM_CATEGORIES, NUM_CLASSES};
use crate::model::{Mode, ModelError, RTrans, SegmentAveraging};
use crate::scalar::Scalar;
use crate::training::{segment_tensors, TrainError};

pub use cv::{run_cv, CvRun, CvSummary, FittedRTrans, FoldResult, RTransAssessor, SkillAssessor, TrialOutcome};
pub use spearman::{average_ranks, spearman};
pub use tables::{
    report_tables, table1_references, table2_references, table3_references, ReferenceRow, Table, TableRow, Tables,
    TABLE2_RTRANS_ACROSS_ALT,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("value out of range: {0}")]
    Range(String),
    #[error("length mismatch: {left} vs {right}")]
    LengthMismatch { left: usize, right: usize },
    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),
    #[error("no results to report")]
    NoResults,
    #[error("fold {fold}: {source}")]
    Fold {
        fold: String,
        #[source]
        source: Box<EvalError>,
    },
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
}

/// Which per-category score feeds the GRS used for ranking.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GrsMode {
    /// Probability-weighted mean score per category.
    #[default]
    Expected,
    /// Most probable score per category.
    Argmax,
}

impl std::str::FromStr for GrsMode {
    type Err = EvalError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "expected" => Ok(GrsMode::Expected),
            "argmax" => Ok(GrsMode::Argmax),
            _ => Err(EvalError::Range(format!("unknown GRS mode {s:?}"))),
        }
    }
}

pub type ClassProbs = [[f64; NUM_CLASSES]; NUM_CATEGORIES];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrialPrediction {
    pub trial_id: String,
    pub segment_len: usize,
    /// First frame of each scored segment.
    pub segment_starts: Vec<usize>,
    /// Per segment: class probabilities of each category's head.
    pub segment_probs: Vec<ClassProbs>,
    /// Trial-level class distribution per category.
    pub trial_probs: ClassProbs,
    pub final_osats: [u8; NUM_CATEGORIES],
    pub expected_osats: [f64; NUM_CATEGORIES],
    pub grs_mode: GrsMode,
    pub grs: f64,
}

impl TrialPrediction {
    /// Per-category score under the prediction's GRS mode.
    pub fn scores(&self) -> [f64; NUM_CATEGORIES] {
        match self.grs_mode {
            GrsMode::Expected => self.expected_osats,
            GrsMode::Argmax => self.final_osats.map(f64::from),
        }
    }

    /// Most probable score of every category in segment `s`.
    pub fn segment_scores(&self, s: usize) -> [u8; NUM_CATEGORIES] {
        self.segment_probs[s].map(|p| argmax(&p) as u8 + 1)
    }
}

fn softmax(z: &[f64]) -> [f64; NUM_CLASSES] {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut out = [0.0; NUM_CLASSES];
    let mut total = 0.0;
    for (o, &v) in out.iter_mut().zip(z) {
        *o = (v - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
    out
}

/// First index of the largest entry.
fn argmax(p: &[f64]) -> usize {
    p.iter()
        .enumerate()
        .fold(
            (0, f64::NEG_INFINITY),
            |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) },
        )
        .0
}

fn check_shape(rows: &[Vec<f64>]) -> Result<(), EvalError> {
    if rows.len() != NUM_CATEGORIES || rows.iter().any(|r| r.len() != NUM_CLASSES) {
        return Err(EvalError::Range(format!(
            "expected {NUM_CATEGORIES} x {NUM_CLASSES} head outputs"
        )));
    }
    Ok(())
}

/// Arithmetic sum of five scores in `[1, 5]`.
pub fn aggregate_grs(osats: &[f64; NUM_CATEGORIES]) -> Result<f64, EvalError> {
    if let Some(v) = osats.iter().find(|v| !(1.0..=5.0).contains(*v)) {
        return Err(EvalError::Range(format!("OSATS score {v} outside [1, 5]")));
    }
    Ok(osats.iter().sum())
}

/// Builds a prediction from raw head outputs.
///
/// `segment_logits` is `[segment][category][class]`; `averaged` is the
/// model's segment average, which is logits or probabilities depending on
/// `averaging`. The trial distribution is the softmax of averaged logits, or
/// the averaged probabilities directly.
pub fn predict_from_outputs(
    trial_id: &str,
    segment_len: usize,
    segment_starts: Vec<usize>,
    segment_logits: &[Vec<Vec<f64>>],
    averaged: &[Vec<f64>],
    averaging: SegmentAveraging,
    grs_mode: GrsMode,
) -> Result<TrialPrediction, EvalError> {
    if segment_logits.is_empty() {
        return Err(EvalError::Model(ModelError::EmptySequence));
    }
    if segment_logits.len() != segment_starts.len() {
        return Err(EvalError::LengthMismatch {
            left: segment_logits.len(),
            right: segment_starts.len(),
        });
    }
    check_shape(averaged)?;
    let mut segment_probs = Vec::with_capacity(segment_logits.len());
    for seg in segment_logits {
        check_shape(seg)?;
        segment_probs.push(std::array::from_fn(|n| softmax(&seg[n])));
    }
    let trial_probs: ClassProbs = std::array::from_fn(|n| match averaging {
        SegmentAveraging::Logits => softmax(&averaged[n]),
        SegmentAveraging::Probabilities => {
            let total: f64 = averaged[n].iter().sum();
            std::array::from_fn(|k| averaged[n][k] / total)
        }
    });
    let final_osats = trial_probs.map(|p| argmax(&p) as u8 + 1);
    let expected_osats = trial_probs.map(|p| {
        let e: f64 = p.iter().enumerate().map(|(k, v)| (k + 1) as f64 * v).sum();
        e.clamp(1.0, NUM_CLASSES as f64)
    });
    let mut pred = TrialPrediction {
        trial_id: trial_id.to_string(),
        segment_len,
        segment_starts,
        segment_probs,
        trial_probs,
        final_osats,
        expected_osats,
        grs_mode,
        grs: 0.0,
    };
    pred.grs = aggregate_grs(&pred.scores())?;
    Ok(pred)
}

/// Eval-mode prediction for one trial.
pub fn predict_trial<T: Scalar>(
    model: &RTrans<T>,
    trial: &KinematicTrial,
    grs_mode: GrsMode,
) -> Result<TrialPrediction, EvalError> {
    let config = model.config();
    let segments = segment(&trial.frames, &trial.trial_id, config.segment_len)?;
    let inputs = segment_tensors::<T>(&trial.frames, &trial.trial_id, config)?;
    let out = model.forward_trial(&inputs, Mode::Eval)?;
    let to_f64 =
        |rows: &[Vec<T>]| -> Vec<Vec<f64>> { rows.iter().map(|r| r.iter().map(|v| v.as_f64()).collect()).collect() };
    let segment_logits: Vec<Vec<Vec<f64>>> = out.segment_logits.iter().map(|s| to_f64(s)).collect();
    predict_from_outputs(
        &trial.trial_id,
        config.segment_len,
        segments.iter().map(|s| s.start_frame).collect(),
        &segment_logits,
        &to_f64(&out.averaged),
        config.averaging,
        grs_mode,
    )
}

#[cfg(test)]
mod tests;
