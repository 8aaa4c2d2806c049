//! Recurrent transformer for segment-level surgical skill assessment from
//! robot kinematics, with the data pipeline, training loop, cross-validated
//! evaluation and qualitative feedback built around it.
//!
//! The numeric core ([`autodiff`], [`model`], [`training`]) is generic over
//! [`scalar::Scalar`] (`f32` or `f64`); the aliases below fix it to `f64`.

pub mod autodiff;
pub mod cli;
pub mod dataset;
pub mod evaluation;
pub mod feedback;
pub mod gradcheck;
pub mod model;
pub mod scalar;
pub mod training;

pub use scalar::Scalar;

pub type Real = f64;
pub type Tensor = autodiff::Tensor<Real>;
pub type Tape = autodiff::Tape<Real>;
pub type Model = model::RTrans<Real>;
pub type Model32 = model::RTrans<f32>;
pub type TrainOutput = training::TrainOutput<Real>;
