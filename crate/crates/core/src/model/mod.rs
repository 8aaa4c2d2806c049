//! The recurrent transformer.
//!
//! A trial is processed one segment at a time. The backbone fuses the
//! current segment `x_s` with the previous hidden state `z_{s-1}` through
//! three fusion modules (self-attention over the evolving representation,
//! cross-attention against the previous state, feed-forward; post-norm
//! residuals), with `x_s` added back onto the output of the second module.
//! Each hidden state is mean-pooled over time and scored by one MLP head per
//! OSATS category. Trial-level outputs are the mean over segments.

mod checkpoint;
mod params;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{AutodiffError, BatchNormMode, Tape, Tensor, Var};
use crate::dataset::{DEFAULT_SEGMENT_LEN, FEATURE_DIM, NUM_CATEGORIES, NUM_CLASSES};
use crate::scalar::Scalar;

pub use checkpoint::{CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use params::ParamStore;
use params::{AttentionIdx, FusionIdx, HeadIdx, Layout, NormIdx};

pub const FUSION_MODULES: usize = 3;
/// Index of the fusion module whose output receives the `x_s` residual.
const RESIDUAL_AFTER: usize = 1;
const LAYERNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_EPS: f64 = 1e-5;
pub const BATCHNORM_MOMENTUM: f64 = 0.1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error(transparent)]
    Tensor(#[from] AutodiffError),
    #[error("trial has no segments")]
    EmptySequence,
    #[error("checkpoint config mismatch: {0}")]
    ConfigMismatch(String),
    #[error("bad checkpoint: {0}")]
    Checkpoint(String),
    #[error("checkpoint io on {}: {source}", .path.display())]
    Io {
        path: std::path::PathBuf,
        #[source]
        source: std::io::Error,
    },
}

/// What the per-segment head outputs are averaged as before the loss.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SegmentAveraging {
    #[default]
    Logits,
    Probabilities,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub segment_len: usize,
    pub d_model: usize,
    pub num_classes: usize,
    pub num_categories: usize,
    pub heads: usize,
    pub mlp_hidden: usize,
    pub ffn_expansion: usize,
    pub averaging: SegmentAveraging,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            segment_len: DEFAULT_SEGMENT_LEN,
            d_model: FEATURE_DIM,
            num_classes: NUM_CLASSES,
            num_categories: NUM_CATEGORIES,
            heads: 4,
            mlp_hidden: 128,
            ffn_expansion: 2,
            averaging: SegmentAveraging::Logits,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// `L = 4, D = 6, heads = 2, mlp_hidden = 8`: small enough for exhaustive gradient checks.
    pub fn tiny() -> Self {
        Self {
            segment_len: 4,
            d_model: 6,
            heads: 2,
            mlp_hidden: 8,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let positive = [
            ("segment_len", self.segment_len),
            ("d_model", self.d_model),
            ("num_classes", self.num_classes),
            ("num_categories", self.num_categories),
            ("heads", self.heads),
            ("mlp_hidden", self.mlp_hidden),
            ("ffn_expansion", self.ffn_expansion),
        ];
        if let Some((name, _)) = positive.iter().find(|(_, v)| *v == 0) {
            return Err(ModelError::Config(format!("{name} must be at least 1")));
        }
        if !self.d_model.is_multiple_of(self.heads) {
            return Err(ModelError::Config(format!(
                "d_model {} not divisible by {} heads",
                self.d_model, self.heads
            )));
        }
        Ok(())
    }

    /// Learnable scalar count implied by the block structure.
    pub fn parameter_count(&self) -> usize {
        let d = self.d_model;
        let attention = 4 * (d * d + d);
        let norms = 3 * 2 * d;
        let ffn_hidden = self.ffn_expansion * d;
        let ffn = d * ffn_hidden + ffn_hidden + ffn_hidden * d + d;
        let fusion = 2 * attention + norms + ffn;
        let h = self.mlp_hidden;
        let head = d * h + h + 2 * h + h * self.num_classes + self.num_classes;
        FUSION_MODULES * fusion + self.num_categories * head
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    /// Batchnorm normalizes with batch statistics.
    Train,
    /// Batchnorm uses running statistics; outputs are per-segment independent of the batch.
    Eval,
}

/// Running statistics of one head's batchnorm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

impl<T: Scalar> RunningStats<T> {
    fn new(width: usize) -> Self {
        Self {
            mean: vec![T::zero(); width],
            var: vec![T::one(); width],
        }
    }

    /// Exponential update with the unbiased batch variance.
    pub fn update(&mut self, batch_mean: &[T], batch_var: &[T], batch_rows: usize) {
        let momentum = T::lit(BATCHNORM_MOMENTUM);
        let keep = T::one() - momentum;
        let correction = if batch_rows > 1 {
            T::from_usize(batch_rows).unwrap() / T::from_usize(batch_rows - 1).unwrap()
        } else {
            T::one()
        };
        for (m, &b) in self.mean.iter_mut().zip(batch_mean) {
            *m = keep * *m + momentum * b;
        }
        for (v, &b) in self.var.iter_mut().zip(batch_var) {
            *v = keep * *v + momentum * b * correction;
        }
    }
}

/// Hidden state `z_s` of shape `L × D`.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenState<T> {
    pub z: Tensor<T>,
    pub segment_index: usize,
}

impl<T: Scalar> HiddenState<T> {
    pub fn zeros(config: &ModelConfig) -> Self {
        Self {
            z: Tensor::zeros(&[config.segment_len, config.d_model]),
            segment_index: 0,
        }
    }
}

/// Tape handles for one trial's outputs.
#[derive(Clone, Debug)]
pub struct TrialForward {
    /// Per category: `S × num_classes` logits, one row per segment.
    pub segment_logits: Vec<Var>,
    /// Per category: `1 × num_classes` segment average (logits or probabilities).
    pub averaged: Vec<Var>,
}

#[derive(Clone, Debug)]
pub struct BatchForward {
    pub trials: Vec<TrialForward>,
    /// Train-mode batchnorm node per head.
    bn_nodes: Vec<Var>,
    bn_rows: usize,
}

/// Plain-value per-trial outputs.
#[derive(Clone, Debug, PartialEq)]
pub struct TrialLogits<T> {
    /// `[segment][category][class]`
    pub segment_logits: Vec<Vec<Vec<T>>>,
    /// `[category][class]`
    pub averaged: Vec<Vec<T>>,
}

/// The model: configuration, parameters and batchnorm buffers.
#[derive(Clone, Debug, PartialEq)]
pub struct RTrans<T> {
    config: ModelConfig,
    params: ParamStore<T>,
    layout: Layout,
    running: Vec<RunningStats<T>>,
}

impl<T: Scalar> RTrans<T> {
    /// Deterministic initialization from `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self, ModelError> {
        config.validate()?;
        let (params, layout) = params::build(&config);
        let running = (0..config.num_categories)
            .map(|_| RunningStats::new(config.mlp_hidden))
            .collect();
        Ok(Self {
            config,
            params,
            layout,
            running,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &ParamStore<T> {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.params
    }

    pub fn running_stats(&self) -> &[RunningStats<T>] {
        &self.running
    }

    pub fn running_stats_mut(&mut self) -> &mut [RunningStats<T>] {
        &mut self.running
    }

    /// Registers all parameters on `tape`, differentiable when `trainable`.
    pub fn bind(&self, tape: &mut Tape<T>, trainable: bool) -> Vec<Var> {
        self.params
            .tensors()
            .iter()
            .map(|t| tape.leaf(t.clone(), trainable))
            .collect()
    }

    /// Binds an explicit parameter set in canonical order (used by gradient checks).
    pub fn bind_vars(&self, vars: &[Var]) -> Result<(), ModelError> {
        if vars.len() != self.params.len() {
            return Err(ModelError::Config(format!(
                "expected {} parameter tensors, got {}",
                self.params.len(),
                vars.len()
            )));
        }
        Ok(())
    }

    fn linear(&self, tape: &mut Tape<T>, p: &[Var], x: Var, w: usize, b: usize) -> Result<Var, AutodiffError> {
        let h = tape.matmul(x, p[w])?;
        tape.add_bias(h, p[b])
    }

    fn layernorm(&self, tape: &mut Tape<T>, p: &[Var], x: Var, n: NormIdx) -> Result<Var, AutodiffError> {
        tape.layernorm(x, p[n.gamma], p[n.beta], T::lit(LAYERNORM_EPS))
    }

    fn attention(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        idx: &AttentionIdx,
        query_src: Var,
        kv_src: Var,
    ) -> Result<Var, AutodiffError> {
        let q = self.linear(tape, p, query_src, idx.wq, idx.bq)?;
        let k = self.linear(tape, p, kv_src, idx.wk, idx.bk)?;
        let v = self.linear(tape, p, kv_src, idx.wv, idx.bv)?;
        let heads = self.config.heads;
        let attended = if heads == 1 {
            tape.scaled_dot_product_attention(q, k, v)?
        } else {
            let dh = self.config.d_model / heads;
            let mut outs = Vec::with_capacity(heads);
            for h in 0..heads {
                let qh = tape.slice_cols(q, h * dh, dh)?;
                let kh = tape.slice_cols(k, h * dh, dh)?;
                let vh = tape.slice_cols(v, h * dh, dh)?;
                outs.push(tape.scaled_dot_product_attention(qh, kh, vh)?);
            }
            tape.concat_cols(&outs)?
        };
        self.linear(tape, p, attended, idx.wo, idx.bo)
    }

    fn fusion_module(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        m: &FusionIdx,
        u: Var,
        state: Var,
    ) -> Result<Var, AutodiffError> {
        let sa = self.attention(tape, p, &m.self_attn, u, u)?;
        let a = tape.add(u, sa)?;
        let a = self.layernorm(tape, p, a, m.norm1)?;
        let ca = self.attention(tape, p, &m.cross_attn, a, state)?;
        let b = tape.add(a, ca)?;
        let b = self.layernorm(tape, p, b, m.norm2)?;
        let f = self.linear(tape, p, b, m.ffn_w1, m.ffn_b1)?;
        let f = tape.relu(f);
        let f = self.linear(tape, p, f, m.ffn_w2, m.ffn_b2)?;
        let c = tape.add(b, f)?;
        self.layernorm(tape, p, c, m.norm3)
    }

    /// Backbone `z_s = h(x_s, z_{s-1})` on the tape.
    pub fn backbone(&self, tape: &mut Tape<T>, p: &[Var], x: Var, z_prev: Var) -> Result<Var, ModelError> {
        let expected = [self.config.segment_len, self.config.d_model];
        for v in [x, z_prev] {
            if tape.shape(v) != expected {
                return Err(AutodiffError::ShapeMismatch {
                    op: "backbone",
                    lhs: tape.shape(v).to_vec(),
                    rhs: expected.to_vec(),
                }
                .into());
            }
        }
        let mut u = x;
        for (i, module) in self.layout.fusion.iter().enumerate() {
            u = self.fusion_module(tape, p, module, u, z_prev)?;
            if i == RESIDUAL_AFTER {
                u = tape.add(u, x)?;
            }
        }
        Ok(u)
    }

    fn head(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        idx: &HeadIdx,
        running: &RunningStats<T>,
        pooled: Var,
        mode: Mode,
    ) -> Result<(Var, Var), AutodiffError> {
        let h = self.linear(tape, p, pooled, idx.fc1_w, idx.fc1_b)?;
        let bn_mode = match mode {
            Mode::Train => BatchNormMode::Train {
                eps: T::lit(BATCHNORM_EPS),
            },
            Mode::Eval => BatchNormMode::Eval {
                running_mean: &running.mean,
                running_var: &running.var,
                eps: T::lit(BATCHNORM_EPS),
            },
        };
        let bn = tape.batchnorm(h, p[idx.bn.gamma], p[idx.bn.beta], bn_mode)?;
        let a = tape.relu(bn);
        let logits = self.linear(tape, p, a, idx.fc2_w, idx.fc2_b)?;
        Ok((logits, bn))
    }

    /// Runs the recurrence over every trial and scores all segments.
    ///
    /// In train mode the head batchnorm layers see every segment of every
    /// trial in the batch as one batch.
    pub fn forward_batch(
        &self,
        tape: &mut Tape<T>,
        p: &[Var],
        trials: &[Vec<Tensor<T>>],
        mode: Mode,
    ) -> Result<BatchForward, ModelError> {
        self.bind_vars(p)?;
        if trials.iter().any(Vec::is_empty) || trials.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        let mut pooled_rows = Vec::new();
        let mut counts = Vec::with_capacity(trials.len());
        for segments in trials {
            let mut z = tape.constant(Tensor::zeros(&[self.config.segment_len, self.config.d_model]));
            for seg in segments {
                let x = tape.constant(seg.clone());
                z = self.backbone(tape, p, x, z)?;
                pooled_rows.push(tape.mean(z, 0)?);
            }
            counts.push(segments.len());
        }
        let pooled = tape.concat_rows(&pooled_rows)?;

        let mut per_head_logits = Vec::with_capacity(self.layout.heads.len());
        let mut bn_nodes = Vec::new();
        for (idx, running) in self.layout.heads.iter().zip(&self.running) {
            let (logits, bn) = self.head(tape, p, idx, running, pooled, mode)?;
            per_head_logits.push(logits);
            bn_nodes.push(bn);
        }

        let mut out = Vec::with_capacity(trials.len());
        let mut offset = 0;
        for &s in &counts {
            let mut segment_logits = Vec::with_capacity(per_head_logits.len());
            let mut averaged = Vec::with_capacity(per_head_logits.len());
            for &logits in &per_head_logits {
                let rows = tape.slice_rows(logits, offset, s)?;
                let avg = match self.config.averaging {
                    SegmentAveraging::Logits => tape.mean(rows, 0)?,
                    SegmentAveraging::Probabilities => {
                        let probs = tape.softmax(rows, 1)?;
                        tape.mean(probs, 0)?
                    }
                };
                segment_logits.push(rows);
                averaged.push(avg);
            }
            offset += s;
            out.push(TrialForward {
                segment_logits,
                averaged,
            });
        }
        Ok(BatchForward {
            trials: out,
            bn_nodes: if mode == Mode::Train { bn_nodes } else { Vec::new() },
            bn_rows: offset,
        })
    }

    /// Folds the batch statistics recorded by a train-mode forward pass into the running buffers.
    pub fn update_running_stats(&mut self, tape: &Tape<T>, forward: &BatchForward) {
        for (stats, &node) in self.running.iter_mut().zip(&forward.bn_nodes) {
            if let Some((mean, var)) = tape.batch_stats(node) {
                stats.update(mean, var, forward.bn_rows);
            }
        }
    }

    /// One backbone step on plain values.
    pub fn fusion_forward(&self, z_prev: &HiddenState<T>, x_s: &Tensor<T>) -> Result<HiddenState<T>, ModelError> {
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let x = tape.constant(x_s.clone());
        let z = tape.constant(z_prev.z.clone());
        let out = self.backbone(&mut tape, &p, x, z)?;
        Ok(HiddenState {
            z: tape.value(out).clone(),
            segment_index: z_prev.segment_index + 1,
        })
    }

    /// Eval-mode head logits for one hidden state: `[category][class]`.
    pub fn heads_forward(&self, state: &HiddenState<T>) -> Result<Vec<Vec<T>>, ModelError> {
        let expected = [self.config.segment_len, self.config.d_model];
        if state.z.shape() != expected {
            return Err(AutodiffError::ShapeMismatch {
                op: "heads",
                lhs: state.z.shape().to_vec(),
                rhs: expected.to_vec(),
            }
            .into());
        }
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let z = tape.constant(state.z.clone());
        let pooled = tape.mean(z, 0)?;
        let mut out = Vec::with_capacity(self.layout.heads.len());
        for (idx, running) in self.layout.heads.iter().zip(&self.running) {
            let (logits, _) = self.head(&mut tape, &p, idx, running, pooled, Mode::Eval)?;
            out.push(tape.value(logits).data().to_vec());
        }
        Ok(out)
    }

    /// Full recurrence over one trial's segments.
    pub fn forward_trial(&self, segments: &[Tensor<T>], mode: Mode) -> Result<TrialLogits<T>, ModelError> {
        if segments.is_empty() {
            return Err(ModelError::EmptySequence);
        }
        let mut tape = Tape::new();
        let p = self.bind(&mut tape, false);
        let fwd = self.forward_batch(&mut tape, &p, &[segments.to_vec()], mode)?;
        let trial = &fwd.trials[0];
        let s = segments.len();
        let segment_logits = (0..s)
            .map(|row| {
                trial
                    .segment_logits
                    .iter()
                    .map(|&v| tape.value(v).row(row).to_vec())
                    .collect()
            })
            .collect();
        let averaged = trial.averaged.iter().map(|&v| tape.value(v).data().to_vec()).collect();
        Ok(TrialLogits {
            segment_logits,
            averaged,
        })
    }
}
