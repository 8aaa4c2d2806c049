use std::fmt::Write as _;

use super::tensor::axis_layout;
use super::{AutodiffError, Tensor};
use crate::scalar::Scalar;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Normalization statistics source for [`Tape::batchnorm`].
#[derive(Clone, Copy, Debug)]
pub enum BatchNormMode<'a, T> {
    /// Normalize with the statistics of the current batch.
    Train { eps: T },
    /// Normalize with stored running statistics.
    Eval {
        running_mean: &'a [T],
        running_var: &'a [T],
        eps: T,
    },
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddBias(Var, Var),
    Scale(Var, T),
    MulConst(Var, Vec<T>),
    Transpose(Var),
    Relu(Var),
    Ln(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Mean(Var, usize),
    Sum(Var),
    SumSquares(Var),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    BatchNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        train: bool,
        batch_mean: Vec<T>,
        batch_var: Vec<T>,
    },
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::AddBias(..) => "add_bias",
            Op::Scale(..) => "scale",
            Op::MulConst(..) => "mul_const",
            Op::Transpose(..) => "transpose",
            Op::Relu(..) => "relu",
            Op::Ln(..) => "ln",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Mean(..) => "mean",
            Op::Sum(..) => "sum",
            Op::SumSquares(..) => "sum_squares",
            Op::SliceRows(..) => "slice_rows",
            Op::SliceCols(..) => "slice_cols",
            Op::ConcatRows(..) => "concat_rows",
            Op::ConcatCols(..) => "concat_cols",
            Op::BatchNorm { .. } => "batchnorm",
            Op::LayerNorm { .. } => "layernorm",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::AddBias(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::MulConst(a, _)
            | Op::Transpose(a)
            | Op::Relu(a)
            | Op::Ln(a)
            | Op::Softmax(a, _)
            | Op::LogSoftmax(a, _)
            | Op::Mean(a, _)
            | Op::Sum(a)
            | Op::SumSquares(a)
            | Op::SliceRows(a, _)
            | Op::SliceCols(a, _) => vec![*a],
            Op::ConcatRows(vs) | Op::ConcatCols(vs) => vs.clone(),
            Op::BatchNorm { input, gamma, beta, .. } | Op::LayerNorm { input, gamma, beta, .. } => {
                vec![*input, *gamma, *beta]
            }
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records tensor operations for reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so every operation's inputs
/// precede it. [`Tape::backward`] consumes the tape.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    nan_check: bool,
    first_non_finite: Option<usize>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            nan_check: true,
            first_non_finite: None,
        }
    }

    /// Disables the per-op finiteness scan. Backward still checks gradients.
    pub fn without_nan_check(mut self) -> Self {
        self.nan_check = false;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, requires_grad, Op::Leaf)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Index of the first node whose forward value contained NaN or infinity.
    pub fn first_non_finite(&self) -> Option<usize> {
        self.first_non_finite
    }

    pub fn check_finite(&self) -> Result<(), AutodiffError> {
        match self.first_non_finite {
            Some(node) => Err(AutodiffError::NonFinite {
                node,
                op: self.nodes[node].op.name(),
            }),
            None => Ok(()),
        }
    }

    /// Batch mean and biased variance recorded by a train-mode batchnorm node.
    pub fn batch_stats(&self, v: Var) -> Option<(&[T], &[T])> {
        match &self.nodes[v.0].op {
            Op::BatchNorm {
                train: true,
                batch_mean,
                batch_var,
                ..
            } => Some((batch_mean, batch_var)),
            _ => None,
        }
    }

    /// Text rendering of the recorded graph, one node per line.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let args: Vec<String> = node.op.inputs().iter().map(|v| format!("%{}", v.0)).collect();
            let _ = writeln!(
                out,
                "%{i} = {}({}) {:?}{}",
                node.op.name(),
                args.join(", "),
                node.value.shape(),
                if node.requires_grad { " grad" } else { "" }
            );
        }
        out
    }

    fn push(&mut self, value: Tensor<T>, requires_grad: bool, op: Op<T>) -> Var {
        let idx = self.nodes.len();
        if self.nan_check && self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some(idx);
        }
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        Var(idx)
    }

    fn push_op(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        let rg = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(value, rg, op)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize), AutodiffError> {
        let t = self.value(v);
        match t.shape() {
            [r, c] => Ok((*r, *c)),
            other => Err(AutodiffError::RankMismatch {
                op,
                expected: 2,
                shape: other.to_vec(),
            }),
        }
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> AutodiffError {
        AutodiffError::ShapeMismatch {
            op,
            lhs: self.shape(a).to_vec(),
            rhs: self.shape(b).to_vec(),
        }
    }

    fn check_axis(&self, v: Var, axis: usize) -> Result<(), AutodiffError> {
        let rank = self.value(v).rank();
        if axis >= rank {
            return Err(AutodiffError::InvalidAxis { axis, rank });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(self.mismatch("matmul", a, b));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), m, k, n, &mut out);
        let value = Tensor::matrix(m, n, out)?;
        Ok(self.push_op(value, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        if self.shape(a) != self.shape(b) {
            return Err(self.mismatch("add", a, b));
        }
        let data = zip_map(self.value(a).data(), self.value(b).data(), |x, y| x + y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push_op(value, Op::Add(a, b)))
    }

    /// Adds a length-`n` bias (shape `[n]` or `[1, n]`) to every row of an `m × n` matrix.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var, AutodiffError> {
        let (m, n) = self.dims2(a, "add_bias")?;
        if self.value(bias).numel() != n {
            return Err(self.mismatch("add_bias", a, bias));
        }
        let b = self.value(bias).data();
        let mut data = self.value(a).data().to_vec();
        for r in 0..m {
            for (x, &bv) in data[r * n..(r + 1) * n].iter_mut().zip(b) {
                *x += bv;
            }
        }
        let value = Tensor::matrix(m, n, data)?;
        Ok(self.push_op(value, Op::AddBias(a, bias)))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push_op(value, Op::Scale(a, c))
    }

    /// Elementwise product with a constant (non-differentiated) tensor.
    pub fn mul_const(&mut self, a: Var, c: &Tensor<T>) -> Result<Var, AutodiffError> {
        if self.shape(a) != c.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "mul_const",
                lhs: self.shape(a).to_vec(),
                rhs: c.shape().to_vec(),
            });
        }
        let data = zip_map(self.value(a).data(), c.data(), |x, y| x * y);
        let value = Tensor::new(self.shape(a).to_vec(), data)?;
        Ok(self.push_op(value, Op::MulConst(a, c.data().to_vec())))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, AutodiffError> {
        let (m, n) = self.dims2(a, "transpose")?;
        let src = self.value(a).data();
        let mut data = vec![T::zero(); m * n];
        for r in 0..m {
            for c in 0..n {
                data[c * m + r] = src[r * n + c];
            }
        }
        let value = Tensor::matrix(n, m, data)?;
        Ok(self.push_op(value, Op::Transpose(a)))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push_op(value, Op::Relu(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| x.ln());
        self.push_op(value, Op::Ln(a))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        self.check_axis(a, axis)?;
        let src = self.value(a);
        let (outer, len, inner) = axis_layout(src.shape(), axis);
        let mut data = src.data().to_vec();
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * len + i) * inner + j;
                let max = (0..len).map(|i| data[idx(i)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for i in 0..len {
                    let e = (data[idx(i)] - max).exp();
                    data[idx(i)] = e;
                    total += e;
                }
                for i in 0..len {
                    data[idx(i)] /= total;
                }
            }
        }
        let value = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push_op(value, Op::Softmax(a, axis)))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        self.check_axis(a, axis)?;
        let src = self.value(a);
        let (outer, len, inner) = axis_layout(src.shape(), axis);
        let mut data = src.data().to_vec();
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * len + i) * inner + j;
                let max = (0..len).map(|i| data[idx(i)]).fold(T::neg_infinity(), T::max);
                let lse = max + (0..len).map(|i| (data[idx(i)] - max).exp()).sum::<T>().ln();
                for i in 0..len {
                    data[idx(i)] -= lse;
                }
            }
        }
        let value = Tensor::new(src.shape().to_vec(), data)?;
        Ok(self.push_op(value, Op::LogSoftmax(a, axis)))
    }

    /// Mean along `axis`, keeping the reduced dimension with size 1.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var, AutodiffError> {
        self.check_axis(a, axis)?;
        let src = self.value(a);
        let (outer, len, inner) = axis_layout(src.shape(), axis);
        let denom = T::from_usize(len).unwrap();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..len {
                for j in 0..inner {
                    data[o * inner + j] += src.data()[(o * len + i) * inner + j];
                }
            }
        }
        for v in &mut data {
            *v /= denom;
        }
        let mut shape = src.shape().to_vec();
        shape[axis] = 1;
        let value = Tensor::new(shape, data)?;
        Ok(self.push_op(value, Op::Mean(a, axis)))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().copied().sum();
        self.push_op(Tensor::scalar(total), Op::Sum(a))
    }

    pub fn sum_squares(&mut self, a: Var) -> Var {
        let total = self.value(a).data().iter().map(|&x| x * x).sum();
        self.push_op(Tensor::scalar(total), Op::SumSquares(a))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let (m, n) = self.dims2(a, "slice_rows")?;
        if len == 0 || start + len > m {
            return Err(AutodiffError::OutOfRange {
                op: "slice_rows",
                start,
                len,
                extent: m,
            });
        }
        let data = self.value(a).data()[start * n..(start + len) * n].to_vec();
        let value = Tensor::matrix(len, n, data)?;
        Ok(self.push_op(value, Op::SliceRows(a, start)))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, AutodiffError> {
        let (m, n) = self.dims2(a, "slice_cols")?;
        if len == 0 || start + len > n {
            return Err(AutodiffError::OutOfRange {
                op: "slice_cols",
                start,
                len,
                extent: n,
            });
        }
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let value = Tensor::matrix(m, len, data)?;
        Ok(self.push_op(value, Op::SliceCols(a, start)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let first = *parts.first().ok_or(AutodiffError::EmptyInput("concat_rows"))?;
        let (_, n) = self.dims2(first, "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != n {
                return Err(self.mismatch("concat_rows", first, p));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::matrix(rows, n, data)?;
        Ok(self.push_op(value, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        let first = *parts.first().ok_or(AutodiffError::EmptyInput("concat_cols"))?;
        let (m, _) = self.dims2(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != m {
                return Err(self.mismatch("concat_cols", first, p));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * n);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let value = Tensor::matrix(m, n, data)?;
        Ok(self.push_op(value, Op::ConcatCols(parts.to_vec())))
    }

    /// Batch normalization over the rows of an `N × F` matrix (features on axis 1).
    pub fn batchnorm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BatchNormMode<'_, T>,
    ) -> Result<Var, AutodiffError> {
        let (rows, feats) = self.dims2(x, "batchnorm")?;
        for p in [gamma, beta] {
            if self.value(p).numel() != feats {
                return Err(self.mismatch("batchnorm", x, p));
            }
        }
        let src = self.value(x).data();
        let (mean, var, eps, train) = match mode {
            BatchNormMode::Train { eps } => {
                let (m, v) = column_moments(src, rows, feats);
                (m, v, eps, true)
            }
            BatchNormMode::Eval {
                running_mean,
                running_var,
                eps,
            } => {
                if running_mean.len() != feats || running_var.len() != feats {
                    return Err(AutodiffError::ShapeMismatch {
                        op: "batchnorm",
                        lhs: vec![rows, feats],
                        rhs: vec![running_mean.len()],
                    });
                }
                (running_mean.to_vec(), running_var.to_vec(), eps, false)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![T::zero(); rows * feats];
        let mut out = vec![T::zero(); rows * feats];
        for r in 0..rows {
            for c in 0..feats {
                let i = r * feats + c;
                xhat[i] = (src[i] - mean[c]) * inv_std[c];
                out[i] = g[c] * xhat[i] + b[c];
            }
        }
        let value = Tensor::matrix(rows, feats, out)?;
        let op = Op::BatchNorm {
            input: x,
            gamma,
            beta,
            xhat,
            inv_std,
            train,
            batch_mean: if train { mean } else { Vec::new() },
            batch_var: if train { var } else { Vec::new() },
        };
        Ok(self.push_op(value, op))
    }

    /// Layer normalization of each row of an `N × F` matrix.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var, AutodiffError> {
        let (rows, feats) = self.dims2(x, "layernorm")?;
        for p in [gamma, beta] {
            if self.value(p).numel() != feats {
                return Err(self.mismatch("layernorm", x, p));
            }
        }
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let nf = T::from_usize(feats).unwrap();
        let mut xhat = vec![T::zero(); rows * feats];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * feats];
        for r in 0..rows {
            let row = &src[r * feats..(r + 1) * feats];
            let mean = row.iter().copied().sum::<T>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / nf;
            let is = T::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..feats {
                let i = r * feats + c;
                xhat[i] = (src[i] - mean) * is;
                out[i] = g[c] * xhat[i] + b[c];
            }
        }
        let value = Tensor::matrix(rows, feats, out)?;
        Ok(self.push_op(
            value,
            Op::LayerNorm {
                input: x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
        ))
    }

    /// `softmax(Q Kᵀ / √d_k) V` for single-head `Q: n × d_k`, `K: m × d_k`, `V: m × d_v`.
    pub fn scaled_dot_product_attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var, AutodiffError> {
        let (_, dk) = self.dims2(q, "attention")?;
        let (mk, dk2) = self.dims2(k, "attention")?;
        let (mv, _) = self.dims2(v, "attention")?;
        if dk != dk2 {
            return Err(self.mismatch("attention", q, k));
        }
        if mk != mv {
            return Err(self.mismatch("attention", k, v));
        }
        let kt = self.transpose(k)?;
        let scores = self.matmul(q, kt)?;
        let scaled = self.scale(scores, T::one() / T::from_usize(dk).unwrap().sqrt());
        let weights = self.softmax(scaled, 1)?;
        self.matmul(weights, v)
    }

    /// Reverse pass from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<T>, AutodiffError> {
        let loss_shape = self.shape(loss).to_vec();
        if loss_shape.iter().product::<usize>() != 1 {
            return Err(AutodiffError::NonScalarLoss { shape: loss_shape });
        }
        if self.nodes.is_empty() {
            return Err(AutodiffError::EmptyTape);
        }
        self.check_finite()?;

        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = vec![None; n];
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }

        let mut out = Vec::with_capacity(n);
        let mut disconnected = Vec::new();
        for (idx, node) in self.nodes.into_iter().enumerate() {
            if !(node.requires_grad && matches!(node.op, Op::Leaf)) {
                out.push(None);
                continue;
            }
            let shape = node.value.shape().to_vec();
            let tensor = match grads[idx].take() {
                Some(g) => Tensor::new(shape, g)?,
                None => {
                    disconnected.push(Var(idx));
                    Tensor::zeros(&shape)
                }
            };
            if !tensor.is_finite() {
                return Err(AutodiffError::NonFiniteGradient { node: idx });
            }
            out.push(Some(tensor));
        }
        if !disconnected.is_empty() {
            log::debug!(
                "{} differentiable leaves unreachable from the loss; their gradients are zero",
                disconnected.len()
            );
        }
        Ok(Gradients {
            grads: out,
            disconnected,
        })
    }

    fn backprop_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.value(*a).dims2().unwrap();
                let (_, n) = self.value(*b).dims2().unwrap();
                if self.requires_grad(*a) {
                    let bd = self.value(*b).data();
                    let ga = self.grad_slot(grads, *a);
                    // dA = G Bᵀ
                    for i in 0..m {
                        for p in 0..k {
                            let mut acc = T::zero();
                            for j in 0..n {
                                acc += g[i * n + j] * bd[p * n + j];
                            }
                            ga[i * k + p] += acc;
                        }
                    }
                }
                if self.requires_grad(*b) {
                    let ad = self.value(*a).data();
                    let gb = self.grad_slot(grads, *b);
                    // dB = Aᵀ G
                    for i in 0..m {
                        for p in 0..k {
                            let av = ad[i * k + p];
                            if av == T::zero() {
                                continue;
                            }
                            for j in 0..n {
                                gb[p * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.requires_grad(v) {
                        add_into(self.grad_slot(grads, v), g);
                    }
                }
            }
            Op::AddBias(a, bias) => {
                if self.requires_grad(*a) {
                    add_into(self.grad_slot(grads, *a), g);
                }
                if self.requires_grad(*bias) {
                    let n = self.value(*bias).numel();
                    let gb = self.grad_slot(grads, *bias);
                    for (i, &gv) in g.iter().enumerate() {
                        gb[i % n] += gv;
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.requires_grad(*a) {
                    let ga = self.grad_slot(grads, *a);
                    for (x, &gv) in ga.iter_mut().zip(g) {
                        *x += gv * *c;
                    }
                }
            }
            Op::MulConst(a, c) => {
                if self.requires_grad(*a) {
                    let ga = self.grad_slot(grads, *a);
                    for ((x, &gv), &cv) in ga.iter_mut().zip(g).zip(c) {
                        *x += gv * cv;
                    }
                }
            }
            Op::Transpose(a) => {
                if self.requires_grad(*a) {
                    let (m, n) = self.value(*a).dims2().unwrap();
                    let ga = self.grad_slot(grads, *a);
                    for r in 0..m {
                        for c in 0..n {
                            ga[r * n + c] += g[c * m + r];
                        }
                    }
                }
            }
            Op::Relu(a) => {
                if self.requires_grad(*a) {
                    let x = self.value(*a).data();
                    let ga = self.grad_slot(grads, *a);
                    for i in 0..g.len() {
                        if x[i] > T::zero() {
                            ga[i] += g[i];
                        }
                    }
                }
            }
            Op::Ln(a) => {
                if self.requires_grad(*a) {
                    let x = self.value(*a).data();
                    let ga = self.grad_slot(grads, *a);
                    for i in 0..g.len() {
                        ga[i] += g[i] / x[i];
                    }
                }
            }
            Op::Softmax(a, axis) => {
                if self.requires_grad(*a) {
                    let (outer, len, inner) = axis_layout(node.value.shape(), *axis);
                    let ga = self.grad_slot(grads, *a);
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |i: usize| (o * len + i) * inner + j;
                            let dot: T = (0..len).map(|i| g[idx(i)] * out[idx(i)]).sum();
                            for i in 0..len {
                                ga[idx(i)] += out[idx(i)] * (g[idx(i)] - dot);
                            }
                        }
                    }
                }
            }
            Op::LogSoftmax(a, axis) => {
                if self.requires_grad(*a) {
                    let (outer, len, inner) = axis_layout(node.value.shape(), *axis);
                    let ga = self.grad_slot(grads, *a);
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |i: usize| (o * len + i) * inner + j;
                            let total: T = (0..len).map(|i| g[idx(i)]).sum();
                            for i in 0..len {
                                ga[idx(i)] += g[idx(i)] - out[idx(i)].exp() * total;
                            }
                        }
                    }
                }
            }
            Op::Mean(a, axis) => {
                if self.requires_grad(*a) {
                    let (outer, len, inner) = axis_layout(self.shape(*a), *axis);
                    let denom = T::from_usize(len).unwrap();
                    let ga = self.grad_slot(grads, *a);
                    for o in 0..outer {
                        for i in 0..len {
                            for j in 0..inner {
                                ga[(o * len + i) * inner + j] += g[o * inner + j] / denom;
                            }
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if self.requires_grad(*a) {
                    let ga = self.grad_slot(grads, *a);
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                }
            }
            Op::SumSquares(a) => {
                if self.requires_grad(*a) {
                    let x = self.value(*a).data();
                    let two = T::lit(2.0);
                    let ga = self.grad_slot(grads, *a);
                    for i in 0..x.len() {
                        ga[i] += two * x[i] * g[0];
                    }
                }
            }
            Op::SliceRows(a, start) => {
                if self.requires_grad(*a) {
                    let (_, n) = self.value(*a).dims2().unwrap();
                    let ga = self.grad_slot(grads, *a);
                    add_into(&mut ga[start * n..start * n + g.len()], g);
                }
            }
            Op::SliceCols(a, start) => {
                if self.requires_grad(*a) {
                    let (m, n) = self.value(*a).dims2().unwrap();
                    let w = g.len() / m;
                    let ga = self.grad_slot(grads, *a);
                    for r in 0..m {
                        add_into(&mut ga[r * n + start..r * n + start + w], &g[r * w..(r + 1) * w]);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if self.requires_grad(p) {
                        add_into(self.grad_slot(grads, p), &g[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, n) = node.value.dims2().unwrap();
                let mut offset = 0;
                for &p in parts {
                    let (_, w) = self.value(p).dims2().unwrap();
                    if self.requires_grad(p) {
                        let gp = self.grad_slot(grads, p);
                        for r in 0..m {
                            add_into(&mut gp[r * w..(r + 1) * w], &g[r * n + offset..r * n + offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::BatchNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
                ..
            } => {
                let (rows, feats) = node.value.dims2().unwrap();
                let gam = self.value(*gamma).data().to_vec();
                if self.requires_grad(*gamma) {
                    let gg = self.grad_slot(grads, *gamma);
                    for i in 0..g.len() {
                        gg[i % feats] += g[i] * xhat[i];
                    }
                }
                if self.requires_grad(*beta) {
                    let gb = self.grad_slot(grads, *beta);
                    for i in 0..g.len() {
                        gb[i % feats] += g[i];
                    }
                }
                if self.requires_grad(*input) {
                    let gx = self.grad_slot(grads, *input);
                    if *train {
                        let nr = T::from_usize(rows).unwrap();
                        for c in 0..feats {
                            let mut sum_d = T::zero();
                            let mut sum_dx = T::zero();
                            for r in 0..rows {
                                let i = r * feats + c;
                                let d = g[i] * gam[c];
                                sum_d += d;
                                sum_dx += d * xhat[i];
                            }
                            for r in 0..rows {
                                let i = r * feats + c;
                                let d = g[i] * gam[c];
                                gx[i] += inv_std[c] / nr * (nr * d - sum_d - xhat[i] * sum_dx);
                            }
                        }
                    } else {
                        for i in 0..g.len() {
                            let c = i % feats;
                            gx[i] += g[i] * gam[c] * inv_std[c];
                        }
                    }
                }
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (rows, feats) = node.value.dims2().unwrap();
                let gam = self.value(*gamma).data().to_vec();
                if self.requires_grad(*gamma) {
                    let gg = self.grad_slot(grads, *gamma);
                    for i in 0..g.len() {
                        gg[i % feats] += g[i] * xhat[i];
                    }
                }
                if self.requires_grad(*beta) {
                    let gb = self.grad_slot(grads, *beta);
                    for i in 0..g.len() {
                        gb[i % feats] += g[i];
                    }
                }
                if self.requires_grad(*input) {
                    let nf = T::from_usize(feats).unwrap();
                    let gx = self.grad_slot(grads, *input);
                    for (r, &inv) in inv_std.iter().enumerate().take(rows) {
                        let span = r * feats..(r + 1) * feats;
                        let mut sum_d = T::zero();
                        let mut sum_dx = T::zero();
                        for i in span.clone() {
                            let d = g[i] * gam[i % feats];
                            sum_d += d;
                            sum_dx += d * xhat[i];
                        }
                        for i in span {
                            let d = g[i] * gam[i % feats];
                            gx[i] += inv / nf * (nf * d - sum_d - xhat[i] * sum_dx);
                        }
                    }
                }
            }
        }
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> &'g mut Vec<T> {
        let len = self.nodes[v.0].value.numel();
        grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
    }
}

/// Gradients of differentiable leaves produced by [`Tape::backward`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    disconnected: Vec<Var>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Differentiable leaves the loss does not depend on. Their gradient is zero.
    pub fn disconnected(&self) -> &[Var] {
        &self.disconnected
    }
}

fn zip_map<T: Copy>(a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Per-column mean and biased variance of a row-major `rows × cols` block.
fn column_moments<T: Scalar>(data: &[T], rows: usize, cols: usize) -> (Vec<T>, Vec<T>) {
    let nr = T::from_usize(rows).unwrap();
    let mut mean = vec![T::zero(); cols];
    for r in 0..rows {
        for c in 0..cols {
            mean[c] += data[r * cols + c];
        }
    }
    for m in &mut mean {
        *m /= nr;
    }
    let mut var = vec![T::zero(); cols];
    for r in 0..rows {
        for c in 0..cols {
            let d = data[r * cols + c] - mean[c];
            var[c] += d * d;
        }
    }
    for v in &mut var {
        *v /= nr;
    }
    (mean, var)
}

pub(crate) fn matmul_acc<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == T::zero() {
                continue;
            }
            for (o, &bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
}
