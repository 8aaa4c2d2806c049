//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! Only the operations the recurrent transformer needs are provided:
//! matrix products, elementwise arithmetic, row/column slicing and
//! concatenation, softmax and log-softmax along an axis, batch and layer
//! normalization, and scaled dot-product attention. Tensors are row-major;
//! most ops take rank-2 inputs.

pub mod probes;
mod tape;
mod tensor;

pub use tape::{BatchNormMode, Gradients, Tape, Var};
pub use tensor::Tensor;

use thiserror::Error;

use crate::scalar::Scalar;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op} expects rank {expected}, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: usize,
        shape: Vec<usize>,
    },
    #[error("invalid shape {shape:?}")]
    InvalidShape { shape: Vec<usize> },
    #[error("axis {axis} out of range for rank {rank}")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("{op}: range {start}..{start}+{len} exceeds extent {extent}")]
    OutOfRange {
        op: &'static str,
        start: usize,
        len: usize,
        extent: usize,
    },
    #[error("{0} needs at least one input")]
    EmptyInput(&'static str),
    #[error("loss must be scalar, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("backward called on an empty tape")]
    EmptyTape,
    #[error("non-finite value produced by node %{node} ({op})")]
    NonFinite { node: usize, op: &'static str },
    #[error("non-finite gradient at leaf %{node}")]
    NonFiniteGradient { node: usize },
}

/// Outcome of a finite-difference gradient comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport<T> {
    /// `max |analytic - numeric| / max(1, |numeric|)` over all coordinates.
    pub max_rel_error: T,
    pub coordinates: usize,
    /// `(input index, flat coordinate)` where the maximum was attained.
    pub worst: Option<(usize, usize)>,
}

/// Compares reverse-mode gradients of a scalar function against central
/// differences, coordinate by coordinate.
pub fn finite_difference_check<T, F>(f: F, x: &Tensor<T>, step: T) -> Result<T, AutodiffError>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, Var) -> Result<Var, AutodiffError>,
{
    let report = finite_difference_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), step)?;
    Ok(report.max_rel_error)
}

/// Multi-input form of [`finite_difference_check`]; every input is treated as
/// a differentiable leaf.
pub fn finite_difference_check_many<T, F>(
    f: F,
    inputs: &[Tensor<T>],
    step: T,
) -> Result<GradCheckReport<T>, AutodiffError>
where
    T: Scalar,
    F: Fn(&mut Tape<T>, &[Var]) -> Result<Var, AutodiffError>,
{
    let eval = |values: &[Tensor<T>]| -> Result<T, AutodiffError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|t| tape.param(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        let v = tape.value(out);
        if v.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss {
                shape: v.shape().to_vec(),
            });
        }
        Ok(v.item())
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    let grads = tape.backward(out)?;

    let mut work: Vec<Tensor<T>> = inputs.to_vec();
    let two = T::lit(2.0);
    let mut report = GradCheckReport {
        max_rel_error: T::zero(),
        coordinates: 0,
        worst: None,
    };
    for (which, var) in vars.iter().enumerate() {
        let analytic = grads.get(*var).expect("input registered as leaf");
        for coord in 0..inputs[which].numel() {
            let orig = inputs[which].data()[coord];
            work[which].data_mut()[coord] = orig + step;
            let plus = eval(&work)?;
            work[which].data_mut()[coord] = orig - step;
            let minus = eval(&work)?;
            work[which].data_mut()[coord] = orig;
            let numeric = (plus - minus) / (two * step);
            let err = (analytic.data()[coord] - numeric).abs() / T::one().max(numeric.abs());
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                if err >= report.max_rel_error {
                    report.worst = Some((which, coord));
                }
            }
            report.coordinates += 1;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests;
