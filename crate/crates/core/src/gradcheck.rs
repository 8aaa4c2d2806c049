//! Finite-difference gradient checks over the full training objective and
//! every tape op.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::probes::{op_probe, OP_NAMES};
use crate::autodiff::{finite_difference_check_many, AutodiffError, Tensor};
use crate::dataset::{Frames, TrialLabels};
use crate::model::{Mode, ModelConfig, ModelError, RTrans};
use crate::training::{batch_loss, class_weights, segment_tensors, LossSpec, TrainError};

pub const OBJECTIVE_TOLERANCE: f64 = 1e-3;
pub const OP_TOLERANCE: f64 = 1e-4;
pub const OBJECTIVE_STEP: f64 = 1e-6;
pub const OP_STEP: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ObjectiveCheck {
    pub max_rel_error: f64,
    pub coordinates: usize,
    pub segments_per_trial: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct OpCheck {
    pub op: &'static str,
    /// Worst error over every seed.
    pub max_rel_error: f64,
    pub seeds: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradcheckSummary {
    pub objective: ObjectiveCheck,
    pub ops: Vec<OpCheck>,
}

impl GradcheckSummary {
    pub fn max_op_error(&self) -> f64 {
        self.ops.iter().map(|o| o.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.objective.max_rel_error < OBJECTIVE_TOLERANCE && self.max_op_error() < OP_TOLERANCE
    }
}

fn only_tensor(e: ModelError) -> AutodiffError {
    match e {
        ModelError::Tensor(t) => t,
        other => panic!("forward validated before the check: {other}"),
    }
}

fn only_tensor_train(e: TrainError) -> AutodiffError {
    match e {
        TrainError::Tensor(t) => t,
        other => panic!("loss validated before the check: {other}"),
    }
}

/// Checks the gradient of the complete objective (weighted smoothed cross
/// entropy over a two-trial batch plus the L2 term) with respect to every
/// parameter, with two segments per trial and batchnorm in train mode.
pub fn check_objective(config: &ModelConfig, seed: u64) -> Result<ObjectiveCheck, TrainError> {
    let model = RTrans::<f64>::new(config.clone())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = [
        TrialLabels::new([1, 2, 3, 4, 5]).expect("in range"),
        TrialLabels::new([5, 3, 3, 2, 1]).expect("in range"),
    ];
    let rows = 2 * config.segment_len;
    let inputs = (0..labels.len())
        .map(|_| {
            let data = (0..rows * config.d_model)
                .map(|_| rng.random_range(-2.0..2.0))
                .collect();
            segment_tensors::<f64>(&Frames::new(rows, config.d_model, data), "gradcheck", config)
        })
        .collect::<Result<Vec<Vec<Tensor<f64>>>, _>>()?;
    let weights = class_weights(&labels)?;
    let spec = LossSpec {
        weights: &weights,
        smoothing: 0.3,
        averaging: config.averaging,
    };
    let lambda = 0.01;

    let mut tape = crate::autodiff::Tape::new();
    let vars = model.bind(&mut tape, true);
    let fwd = model.forward_batch(&mut tape, &vars, &inputs, Mode::Train)?;
    batch_loss(&mut tape, &vars, &fwd.trials, &labels, lambda, &spec)?;

    let report = finite_difference_check_many(
        |tape, vars| {
            let fwd = model
                .forward_batch(tape, vars, &inputs, Mode::Train)
                .map_err(only_tensor)?;
            batch_loss(tape, vars, &fwd.trials, &labels, lambda, &spec).map_err(only_tensor_train)
        },
        model.params().tensors(),
        OBJECTIVE_STEP,
    )?;
    Ok(ObjectiveCheck {
        max_rel_error: report.max_rel_error,
        coordinates: report.coordinates,
        segments_per_trial: inputs[0].len(),
    })
}

/// Checks every op on `seeds` independent random probes.
pub fn check_ops(seeds: usize, base_seed: u64) -> Result<Vec<OpCheck>, AutodiffError> {
    let mut out: Vec<OpCheck> = OP_NAMES
        .iter()
        .map(|&op| OpCheck {
            op,
            max_rel_error: 0.0,
            seeds,
        })
        .collect();
    for s in 0..seeds as u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(base_seed + s);
        for (i, check) in out.iter_mut().enumerate() {
            let (inputs, f) = op_probe(i, &mut rng);
            let report = finite_difference_check_many(|t, v| f(t, v), &inputs, OP_STEP)?;
            check.max_rel_error = check.max_rel_error.max(report.max_rel_error);
        }
    }
    Ok(out)
}

/// Objective check on `config` plus op checks over `op_seeds` seeds.
pub fn run(config: &ModelConfig, seed: u64, op_seeds: usize) -> Result<GradcheckSummary, TrainError> {
    Ok(GradcheckSummary {
        objective: check_objective(config, seed)?,
        ops: check_ops(op_seeds, seed)?,
    })
}
