//! Reverse-mode automatic differentiation over [`Tensor`]s.
//!
//! Operations are recorded into a linear tape in execution order, so the
//! node list is already topologically sorted. `backward` walks it once in
//! reverse and the tape is consumed afterwards; a second call is rejected.

use super::tensor::{
    broadcast_index_map, broadcast_shape, matmul_at_into, matmul_bt_into, matmul_into,
    reduce_to_shape, Tensor,
};
use super::TensorError;

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary {
    Log,
    Exp,
    Sigmoid,
    LogSigmoid,
    Relu,
    Abs,
    Sqrt,
    Scale(f64),
    AddScalar(f64),
    Pow(f64),
    Sin,
    Cos,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
    Maximum,
    Minimum,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Unary(Unary, usize),
    Binary(Binary, usize, usize),
    MatMul(usize, usize),
    Transpose(usize),
    Sum(usize),
    Mean(usize),
    Max(usize, usize),
    SumAxis { a: usize, outer: usize, n: usize, inner: usize },
    Reshape(usize),
    SoftmaxRows(usize),
    LogSoftmaxMasked { a: usize, mask: Vec<bool> },
    LayerNorm { x: usize, gamma: usize, beta: usize, eps: f64 },
    Gather { a: usize, index: Vec<usize> },
    Concat(Vec<usize>),
    L2NormalizeRows(usize),
    SparseLinear { a: usize, plan: SparsePlan },
}

/// A fixed linear map `out[o] = Σ w · in[i]`, stored row-compressed.
///
/// Used for pooling operators whose sampling pattern is a constant of the
/// forward pass (bilinear RoI pooling, patch extraction).
#[derive(Clone, Debug, Default)]
pub struct SparsePlan {
    offsets: Vec<usize>,
    entries: Vec<(usize, f64)>,
}

impl SparsePlan {
    pub fn new() -> Self {
        SparsePlan {
            offsets: vec![0],
            entries: Vec::new(),
        }
    }

    /// Appends one output element built from `(input index, weight)` terms.
    pub fn push_output(&mut self, terms: impl IntoIterator<Item = (usize, f64)>) {
        self.entries.extend(terms);
        self.offsets.push(self.entries.len());
    }

    pub fn outputs(&self) -> usize {
        self.offsets.len() - 1
    }

    pub fn apply(&self, input: &[f64]) -> Vec<f64> {
        (0..self.outputs())
            .map(|o| {
                self.entries[self.offsets[o]..self.offsets[o + 1]]
                    .iter()
                    .map(|&(i, w)| w * input[i])
                    .sum()
            })
            .collect()
    }

    fn apply_transpose(&self, grad: &[f64], input_len: usize) -> Vec<f64> {
        let mut out = vec![0.0; input_len];
        for (o, g) in grad.iter().enumerate() {
            for &(i, w) in &self.entries[self.offsets[o]..self.offsets[o + 1]] {
                out[i] += w * g;
            }
        }
        out
    }

    fn max_index(&self) -> Option<usize> {
        self.entries.iter().map(|&(i, _)| i).max()
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording tape for reverse-mode differentiation.
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros shaped like `like` when `v` was unreachable.
    pub fn get_or_zeros(&self, v: Var, like: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(like))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn log_sigmoid(x: f64) -> f64 {
    x.min(0.0) - (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            consumed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a tensor that never receives gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, false)
    }

    /// Records a differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push_raw(t, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A constant copy of `v`; gradient does not flow back through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    fn push_raw(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced by {op:?}");
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[usize]) -> Var {
        let rg = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        if rg {
            self.push_raw(value, op, true)
        } else {
            self.push_raw(value, Op::Leaf, false)
        }
    }

    // ---- elementwise -------------------------------------------------

    fn unary(&mut self, kind: Unary, a: Var) -> Result<Var, TensorError> {
        let x = self.value(a);
        let out = match kind {
            Unary::Log => {
                if let Some(bad) = x.data().iter().find(|&&v| !(v > 0.0)) {
                    return Err(TensorError::Domain {
                        op: "log",
                        detail: format!("non-positive input {bad}"),
                    });
                }
                x.map(f64::ln)
            }
            Unary::Sqrt => {
                if let Some(bad) = x.data().iter().find(|&&v| v < 0.0) {
                    return Err(TensorError::Domain {
                        op: "sqrt",
                        detail: format!("negative input {bad}"),
                    });
                }
                x.map(f64::sqrt)
            }
            Unary::Pow(p) => {
                let integral = p.fract() == 0.0;
                if let Some(bad) = x
                    .data()
                    .iter()
                    .find(|&&v| (v < 0.0 && !integral) || (v == 0.0 && p < 0.0))
                {
                    return Err(TensorError::Domain {
                        op: "pow",
                        detail: format!("base {bad} with exponent {p}"),
                    });
                }
                x.map(|v| v.powf(p))
            }
            Unary::Exp => x.map(f64::exp),
            Unary::Sigmoid => x.map(sigmoid),
            Unary::LogSigmoid => x.map(log_sigmoid),
            Unary::Relu => x.map(|v| v.max(0.0)),
            Unary::Abs => x.map(f64::abs),
            Unary::Scale(s) => x.map(|v| v * s),
            Unary::AddScalar(s) => x.map(|v| v + s),
            Unary::Sin => x.map(f64::sin),
            Unary::Cos => x.map(f64::cos),
        };
        Ok(self.push(out, Op::Unary(kind, a.0), &[a.0]))
    }

    pub fn log(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(Unary::Log, a)
    }
    pub fn exp(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(Unary::Exp, a)
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(Unary::Sigmoid, a)
    }
    /// `ln σ(x)`, evaluated without overflow for large `|x|`.
    pub fn log_sigmoid(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(Unary::LogSigmoid, a)
    }
    pub fn relu(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(Unary::Relu, a)
    }
    pub fn abs(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(Unary::Abs, a)
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(Unary::Sqrt, a)
    }
    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        self.unary(Unary::Scale(s), a)
    }
    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var, TensorError> {
        self.unary(Unary::AddScalar(s), a)
    }
    pub fn neg(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(Unary::Scale(-1.0), a)
    }
    pub fn sin(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(Unary::Sin, a)
    }
    pub fn cos(&mut self, a: Var) -> Result<Var, TensorError> {
        self.unary(Unary::Cos, a)
    }
    /// Elementwise `x^p` for a constant exponent.
    pub fn pow(&mut self, a: Var, p: f64) -> Result<Var, TensorError> {
        self.unary(Unary::Pow(p), a)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var, TensorError> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
            Binary::Maximum => "maximum",
            Binary::Minimum => "minimum",
        };
        let (xa, xb) = (self.value(a), self.value(b));
        let f = |x: f64, y: f64| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
            Binary::Maximum => x.max(y),
            Binary::Minimum => x.min(y),
        };
        if kind == Binary::Div && xb.data().iter().any(|&v| v == 0.0) {
            return Err(TensorError::Domain {
                op: "div",
                detail: "division by zero".into(),
            });
        }
        let out = if xa.shape() == xb.shape() {
            let data = xa
                .data()
                .iter()
                .zip(xb.data())
                .map(|(&x, &y)| f(x, y))
                .collect();
            Tensor::new(xa.shape().to_vec(), data)?
        } else {
            let shape = broadcast_shape(name, xa.shape(), xb.shape())?;
            let ma = broadcast_index_map(xa.shape(), &shape);
            let mb = broadcast_index_map(xb.shape(), &shape);
            let data = ma
                .iter()
                .zip(&mb)
                .map(|(&i, &j)| f(xa.data()[i], xb.data()[j]))
                .collect();
            Tensor::new(shape, data)?
        };
        Ok(self.push(out, Op::Binary(kind, a.0, b.0), &[a.0, b.0]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Add, a, b)
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Sub, a, b)
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Mul, a, b)
    }
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Div, a, b)
    }
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Maximum, a, b)
    }
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        self.binary(Binary::Minimum, a, b)
    }

    /// Explicit broadcast of `a` to `shape`.
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let zeros = self.constant(Tensor::zeros(shape));
        let out = self.add(a, zeros)?;
        if self.shape(out) != shape {
            return Err(TensorError::ShapeMismatch {
                op: "broadcast",
                lhs: self.shape(a).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        Ok(out)
    }

    // ---- linear algebra and shape -----------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        let (xa, xb) = (self.value(a), self.value(b));
        if xa.rank() != 2 || xb.rank() != 2 || xa.shape()[1] != xb.shape()[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: xa.shape().to_vec(),
                rhs: xb.shape().to_vec(),
            });
        }
        let (r, k, c) = (xa.shape()[0], xa.shape()[1], xb.shape()[1]);
        let mut out = vec![0.0; r * c];
        matmul_into(xa.data(), xb.data(), &mut out, r, k, c);
        let t = Tensor::new(vec![r, c], out)?;
        Ok(self.push(t, Op::MatMul(a.0, b.0), &[a.0, b.0]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, TensorError> {
        let x = self.value(a);
        if x.rank() != 2 {
            return Err(TensorError::Invalid {
                op: "transpose",
                detail: format!("expected rank 2, got {:?}", x.shape()),
            });
        }
        let t = x.transpose2();
        Ok(self.push(t, Op::Transpose(a.0), &[a.0]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let t = self.value(a).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a.0), &[a.0]))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: Var) -> Result<Var, TensorError> {
        let s = self.value(a).sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(a.0), &[a.0]))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&mut self, a: Var) -> Result<Var, TensorError> {
        let x = self.value(a);
        if x.is_empty() {
            return Err(TensorError::Invalid {
                op: "mean",
                detail: "empty tensor".into(),
            });
        }
        let m = x.sum() / x.len() as f64;
        Ok(self.push(Tensor::scalar(m), Op::Mean(a.0), &[a.0]))
    }

    /// Maximum over all elements; gradient goes to the first maximiser.
    pub fn max(&mut self, a: Var) -> Result<Var, TensorError> {
        let x = self.value(a);
        let (arg, val) = x
            .data()
            .iter()
            .copied()
            .enumerate()
            .fold((usize::MAX, f64::NEG_INFINITY), |acc, (i, v)| {
                if v > acc.1 {
                    (i, v)
                } else {
                    acc
                }
            });
        if arg == usize::MAX {
            return Err(TensorError::Invalid {
                op: "max",
                detail: "empty tensor".into(),
            });
        }
        Ok(self.push(Tensor::scalar(val), Op::Max(a.0, arg), &[a.0]))
    }

    /// Sums out one axis.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, TensorError> {
        let x = self.value(a);
        if axis >= x.rank() {
            return Err(TensorError::Invalid {
                op: "sum_axis",
                detail: format!("axis {axis} out of range for {:?}", x.shape()),
            });
        }
        let outer: usize = x.shape()[..axis].iter().product();
        let n = x.shape()[axis];
        let inner: usize = x.shape()[axis + 1..].iter().product();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                let base = (o * n + k) * inner;
                for i in 0..inner {
                    out[o * inner + i] += x.data()[base + i];
                }
            }
        }
        let mut shape = x.shape().to_vec();
        shape.remove(axis);
        let t = Tensor::new(shape, out)?;
        Ok(self.push(t, Op::SumAxis { a: a.0, outer, n, inner }, &[a.0]))
    }

    fn rows_cols(&self, op: &'static str, a: Var) -> Result<(usize, usize), TensorError> {
        let x = self.value(a);
        if x.rank() != 2 {
            return Err(TensorError::Invalid {
                op,
                detail: format!("expected rank 2, got {:?}", x.shape()),
            });
        }
        Ok((x.shape()[0], x.shape()[1]))
    }

    /// Row-wise softmax of a 2-D tensor.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, c) = self.rows_cols("softmax_rows", a)?;
        let x = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for j in 0..c {
                let e = (row[j] - m).exp();
                out[i * c + j] = e;
                z += e;
            }
            for j in 0..c {
                out[i * c + j] /= z;
            }
        }
        let t = Tensor::new(vec![r, c], out)?;
        Ok(self.push(t, Op::SoftmaxRows(a.0), &[a.0]))
    }

    /// Row-wise log-softmax restricted to entries where `mask` is true.
    /// Masked-out entries produce 0 and receive no gradient.
    pub fn log_softmax_masked(&mut self, a: Var, mask: Vec<bool>) -> Result<Var, TensorError> {
        let (r, c) = self.rows_cols("log_softmax_masked", a)?;
        if mask.len() != r * c {
            return Err(TensorError::ShapeMismatch {
                op: "log_softmax_masked",
                lhs: vec![r, c],
                rhs: vec![mask.len()],
            });
        }
        let x = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let idx = (i * c..(i + 1) * c).filter(|&k| mask[k]);
            let m = idx.clone().map(|k| x[k]).fold(f64::NEG_INFINITY, f64::max);
            if m == f64::NEG_INFINITY {
                continue;
            }
            let lse = m + idx.clone().map(|k| (x[k] - m).exp()).sum::<f64>().ln();
            for k in idx {
                out[k] = x[k] - lse;
            }
        }
        let t = Tensor::new(vec![r, c], out)?;
        Ok(self.push(t, Op::LogSoftmaxMasked { a: a.0, mask }, &[a.0]))
    }

    /// Layer normalization over the last axis of a 2-D tensor with affine
    /// `gamma`/`beta` of length equal to the row width.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var, TensorError> {
        let (r, c) = self.rows_cols("layer_norm", x)?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(TensorError::ShapeMismatch {
                op: "layer_norm",
                lhs: vec![r, c],
                rhs: self.shape(gamma).to_vec(),
            });
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &xv[i * c..(i + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..c {
                out[i * c + j] = g[j] * (row[j] - mu) * inv + b[j];
            }
        }
        let t = Tensor::new(vec![r, c], out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
            },
            &[x.0, gamma.0, beta.0],
        ))
    }

    /// Selects rows of a 2-D tensor (indices may repeat).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var, TensorError> {
        let (r, c) = self.rows_cols("gather_rows", a)?;
        if let Some(&bad) = rows.iter().find(|&&i| i >= r) {
            return Err(TensorError::Invalid {
                op: "gather_rows",
                detail: format!("row {bad} out of range for {r} rows"),
            });
        }
        let index: Vec<usize> = rows
            .iter()
            .flat_map(|&i| (i * c)..(i + 1) * c)
            .collect();
        self.gather(a, index, &[rows.len(), c])
    }

    /// Selects a contiguous column range of a 2-D tensor.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, TensorError> {
        let (r, c) = self.rows_cols("slice_cols", a)?;
        if start + len > c {
            return Err(TensorError::Invalid {
                op: "slice_cols",
                detail: format!("columns {start}..{} out of range for {c}", start + len),
            });
        }
        let index: Vec<usize> = (0..r)
            .flat_map(|i| (i * c + start)..(i * c + start + len))
            .collect();
        self.gather(a, index, &[r, len])
    }

    /// `out.flat[o] = a.flat[index[o]]`, reshaped to `shape`.
    pub fn gather(&mut self, a: Var, index: Vec<usize>, shape: &[usize]) -> Result<Var, TensorError> {
        let x = self.value(a);
        if index.len() != shape.iter().product::<usize>() {
            return Err(TensorError::ShapeMismatch {
                op: "gather",
                lhs: vec![index.len()],
                rhs: shape.to_vec(),
            });
        }
        if index.iter().any(|&i| i >= x.len()) {
            return Err(TensorError::Invalid {
                op: "gather",
                detail: format!("index out of range for {} elements", x.len()),
            });
        }
        let data = index.iter().map(|&i| x.data()[i]).collect();
        let t = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(t, Op::Gather { a: a.0, index }, &[a.0]))
    }

    /// Stacks 2-D tensors with equal column counts along rows.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat_rows",
            detail: "no inputs".into(),
        })?;
        let (_, c) = self.rows_cols("concat_rows", *first)?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, pc) = self.rows_cols("concat_rows", p)?;
            if pc != c {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    lhs: vec![rows, c],
                    rhs: vec![r, pc],
                });
            }
            data.extend_from_slice(self.value(p).data());
            rows += r;
        }
        let t = Tensor::new(vec![rows, c], data)?;
        let ids: Vec<usize> = parts.iter().map(|v| v.0).collect();
        Ok(self.push(t, Op::Concat(ids.clone()), &ids))
    }

    /// Divides each row by its Euclidean norm. All-zero rows stay zero.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Result<Var, TensorError> {
        let (r, c) = self.rows_cols("l2_normalize_rows", a)?;
        let x = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &x[i * c..(i + 1) * c];
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                for j in 0..c {
                    out[i * c + j] = row[j] / n;
                }
            }
        }
        let t = Tensor::new(vec![r, c], out)?;
        Ok(self.push(t, Op::L2NormalizeRows(a.0), &[a.0]))
    }

    /// Applies a constant sparse linear map to the flattened input.
    pub fn sparse_linear(&mut self, a: Var, plan: SparsePlan, shape: &[usize]) -> Result<Var, TensorError> {
        let x = self.value(a);
        if plan.outputs() != shape.iter().product::<usize>() {
            return Err(TensorError::ShapeMismatch {
                op: "sparse_linear",
                lhs: vec![plan.outputs()],
                rhs: shape.to_vec(),
            });
        }
        if plan.max_index().is_some_and(|m| m >= x.len()) {
            return Err(TensorError::Invalid {
                op: "sparse_linear",
                detail: format!("plan indexes beyond {} inputs", x.len()),
            });
        }
        let t = Tensor::new(shape.to_vec(), plan.apply(x.data()))?;
        Ok(self.push(t, Op::SparseLinear { a: a.0, plan }, &[a.0]))
    }

    // ---- backward ----------------------------------------------------

    /// Reverse pass from a scalar `loss`. The tape cannot be differentiated
    /// twice.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, TensorError> {
        if self.consumed {
            return Err(TensorError::TapeConsumed);
        }
        let lv = &self.nodes[loss.0];
        if lv.value.len() != 1 {
            return Err(TensorError::NonScalarLoss(lv.value.shape().to_vec()));
        }
        if !lv.requires_grad {
            return Err(TensorError::DetachedLoss);
        }
        self.consumed = true;

        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.value.shape(), 1.0));

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let contributions = self.node_backward(id, &g);
            grads[id] = Some(g);
            for (input, gi) in contributions {
                if !self.nodes[input].requires_grad {
                    continue;
                }
                match &mut grads[input] {
                    Some(acc) => acc.add_assign(&gi),
                    slot => *slot = Some(gi),
                }
            }
        }
        Ok(Gradients { grads })
    }

    fn node_backward(&self, id: usize, g: &Tensor) -> Vec<(usize, Tensor)> {
        let node = &self.nodes[id];
        let y = &node.value;
        let val = |i: usize| &self.nodes[i].value;
        match &node.op {
            Op::Leaf => vec![],
            Op::Unary(kind, a) => {
                let x = val(*a);
                let d: Vec<f64> = x
                    .data()
                    .iter()
                    .zip(y.data())
                    .zip(g.data())
                    .map(|((&xv, &yv), &gv)| {
                        gv * match *kind {
                            Unary::Log => 1.0 / xv,
                            Unary::Exp => yv,
                            Unary::Sigmoid => yv * (1.0 - yv),
                            Unary::LogSigmoid => sigmoid(-xv),
                            Unary::Relu => {
                                if xv > 0.0 {
                                    1.0
                                } else {
                                    0.0
                                }
                            }
                            Unary::Abs => xv.signum() * (xv != 0.0) as u8 as f64,
                            Unary::Sqrt => {
                                if yv > 0.0 {
                                    0.5 / yv
                                } else {
                                    0.0
                                }
                            }
                            Unary::Scale(s) => s,
                            Unary::AddScalar(_) => 1.0,
                            Unary::Sin => xv.cos(),
                            Unary::Cos => -xv.sin(),
                            Unary::Pow(p) => {
                                if xv == 0.0 && p < 1.0 {
                                    0.0
                                } else {
                                    p * xv.powf(p - 1.0)
                                }
                            }
                        }
                    })
                    .collect();
                vec![(*a, Tensor::new(x.shape().to_vec(), d).expect("shape"))]
            }
            Op::Binary(kind, a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                let same = xa.shape() == xb.shape();
                let ma = (!same).then(|| broadcast_index_map(xa.shape(), y.shape()));
                let mb = (!same).then(|| broadcast_index_map(xb.shape(), y.shape()));
                let n = y.len();
                let mut ga = vec![0.0; n];
                let mut gb = vec![0.0; n];
                for o in 0..n {
                    let ia = ma.as_ref().map_or(o, |m| m[o]);
                    let ib = mb.as_ref().map_or(o, |m| m[o]);
                    let (u, v, gv) = (xa.data()[ia], xb.data()[ib], g.data()[o]);
                    let (da, db) = match kind {
                        Binary::Add => (1.0, 1.0),
                        Binary::Sub => (1.0, -1.0),
                        Binary::Mul => (v, u),
                        Binary::Div => (1.0 / v, -u / (v * v)),
                        Binary::Maximum => {
                            if u >= v {
                                (1.0, 0.0)
                            } else {
                                (0.0, 1.0)
                            }
                        }
                        Binary::Minimum => {
                            if u <= v {
                                (1.0, 0.0)
                            } else {
                                (0.0, 1.0)
                            }
                        }
                    };
                    ga[o] = gv * da;
                    gb[o] = gv * db;
                }
                let ga = Tensor::new(y.shape().to_vec(), ga).expect("shape");
                let gb = Tensor::new(y.shape().to_vec(), gb).expect("shape");
                vec![
                    (*a, reduce_to_shape(&ga, xa.shape())),
                    (*b, reduce_to_shape(&gb, xb.shape())),
                ]
            }
            Op::MatMul(a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                let (r, k, c) = (xa.shape()[0], xa.shape()[1], xb.shape()[1]);
                let mut ga = vec![0.0; r * k];
                matmul_bt_into(g.data(), xb.data(), &mut ga, r, c, k);
                let mut gb = vec![0.0; k * c];
                matmul_at_into(xa.data(), g.data(), &mut gb, r, k, c);
                vec![
                    (*a, Tensor::new(vec![r, k], ga).expect("shape")),
                    (*b, Tensor::new(vec![k, c], gb).expect("shape")),
                ]
            }
            Op::Transpose(a) => vec![(*a, g.transpose2())],
            Op::Reshape(a) => {
                let t = g.clone().reshape(val(*a).shape()).expect("shape");
                vec![(*a, t)]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(val(*a).shape(), g.item()))],
            Op::Mean(a) => {
                let x = val(*a);
                vec![(*a, Tensor::full(x.shape(), g.item() / x.len() as f64))]
            }
            Op::Max(a, arg) => {
                let mut t = Tensor::zeros(val(*a).shape());
                t.data_mut()[*arg] = g.item();
                vec![(*a, t)]
            }
            Op::SumAxis { a, outer, n, inner } => {
                let x = val(*a);
                let mut out = vec![0.0; x.len()];
                for o in 0..*outer {
                    for k in 0..*n {
                        let base = (o * n + k) * inner;
                        for i in 0..*inner {
                            out[base + i] = g.data()[o * inner + i];
                        }
                    }
                }
                vec![(*a, Tensor::new(x.shape().to_vec(), out).expect("shape"))]
            }
            Op::SoftmaxRows(a) => {
                let (r, c) = (y.shape()[0], y.shape()[1]);
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    let s = &y.data()[i * c..(i + 1) * c];
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let dot: f64 = s.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        out[i * c + j] = s[j] * (gr[j] - dot);
                    }
                }
                vec![(*a, Tensor::new(vec![r, c], out).expect("shape"))]
            }
            Op::LogSoftmaxMasked { a, mask } => {
                let (r, c) = (y.shape()[0], y.shape()[1]);
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    let gsum: f64 = (i * c..(i + 1) * c)
                        .filter(|&k| mask[k])
                        .map(|k| g.data()[k])
                        .sum();
                    for k in (i * c..(i + 1) * c).filter(|&k| mask[k]) {
                        out[k] = g.data()[k] - y.data()[k].exp() * gsum;
                    }
                }
                vec![(*a, Tensor::new(vec![r, c], out).expect("shape"))]
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = val(*x);
                let gm = val(*gamma).data();
                let (r, c) = (xv.shape()[0], xv.shape()[1]);
                let mut dx = vec![0.0; r * c];
                let mut dg = vec![0.0; c];
                let mut db = vec![0.0; c];
                let mut xhat = vec![0.0; c];
                let mut gh = vec![0.0; c];
                for i in 0..r {
                    let row = &xv.data()[i * c..(i + 1) * c];
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let mu = row.iter().sum::<f64>() / c as f64;
                    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    for j in 0..c {
                        xhat[j] = (row[j] - mu) * inv;
                        gh[j] = gr[j] * gm[j];
                        dg[j] += gr[j] * xhat[j];
                        db[j] += gr[j];
                    }
                    let mg = gh.iter().sum::<f64>() / c as f64;
                    let mgx = gh.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                    for j in 0..c {
                        dx[i * c + j] = inv * (gh[j] - mg - xhat[j] * mgx);
                    }
                }
                vec![
                    (*x, Tensor::new(vec![r, c], dx).expect("shape")),
                    (*gamma, Tensor::vector(dg)),
                    (*beta, Tensor::vector(db)),
                ]
            }
            Op::Gather { a, index } => {
                let x = val(*a);
                let mut out = vec![0.0; x.len()];
                for (o, &i) in index.iter().enumerate() {
                    out[i] += g.data()[o];
                }
                vec![(*a, Tensor::new(x.shape().to_vec(), out).expect("shape"))]
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                parts
                    .iter()
                    .map(|&p| {
                        let shape = val(p).shape().to_vec();
                        let n = val(p).len();
                        let t = Tensor::new(shape, g.data()[offset..offset + n].to_vec())
                            .expect("shape");
                        offset += n;
                        (p, t)
                    })
                    .collect()
            }
            Op::L2NormalizeRows(a) => {
                let x = val(*a);
                let (r, c) = (x.shape()[0], x.shape()[1]);
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    let row = &x.data()[i * c..(i + 1) * c];
                    let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    if n == 0.0 {
                        continue;
                    }
                    let yr = &y.data()[i * c..(i + 1) * c];
                    let gr = &g.data()[i * c..(i + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..c {
                        out[i * c + j] = (gr[j] - yr[j] * dot) / n;
                    }
                }
                vec![(*a, Tensor::new(vec![r, c], out).expect("shape"))]
            }
            Op::SparseLinear { a, plan } => {
                let x = val(*a);
                let d = plan.apply_transpose(g.data(), x.len());
                vec![(*a, Tensor::new(x.shape().to_vec(), d).expect("shape"))]
            }
        }
    }
}
