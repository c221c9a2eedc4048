//! Reverse-mode automatic differentiation over dense tensors.
//!
//! Every primitive appends one node to the [`Tape`]. Because a node can only
//! reference nodes that already exist, tape order is a topological order and
//! [`Tape::backward`] simply walks it in reverse, accumulating adjoints.
//! Parameter gradients are then folded into a [`ParamStore`] in tape order,
//! which keeps accumulation order (and thus every bit of the result) fixed.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{dims2, matmul_at_into, matmul_bt_into, matmul_into, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddConst(Var),
    MulConst(Var, Vec<f64>),
    BroadcastRows(Var),
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Transpose(Var),
    Relu(Var),
    LeakyRelu(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    Log(Var),
    Sqrt(Var),
    ClampMin(Var, f64),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Embedding {
        table: Var,
        indices: Vec<usize>,
    },
    Gather {
        x: Var,
        indices: Vec<usize>,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Sum(Var),
    Mean(Var),
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of executed primitives.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: HashMap<ParamId, Var>,
}

/// Adjoints produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;
const LAYER_NORM_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Records a constant input (no gradient).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records an input whose gradient is wanted but which is not a
    /// registered parameter.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Records a parameter leaf. Repeated calls for the same id return the
    /// same [`Var`]. Frozen parameters are recorded as constants.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let t = store.get(id);
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec())
            .expect("parameter tensors are well formed");
        let v = if store.is_frozen(id) {
            self.push(value, Op::Leaf, false)
        } else {
            self.push(value, Op::Param(id), true)
        };
        self.param_vars.insert(id, v);
        v
    }

    fn new_tensor(shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        Tensor::new(shape, data).expect("primitive produced consistent shape")
    }

    fn binary_same_shape(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        let data = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Self::new_tensor(shape, data), op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same_shape("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let data = self.data(a).iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(Self::new_tensor(shape, data), Op::Scale(a, s), needs)
    }

    /// Adds a constant tensor of the same shape (e.g. an attention mask bias).
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        if self.shape(a) != c.shape() {
            return Err(shape_err("add_const", self.shape(a), c.shape()));
        }
        let data = self
            .data(a)
            .iter()
            .zip(c.data())
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        Ok(self.push(Self::new_tensor(shape, data), Op::AddConst(a), needs))
    }

    /// Multiplies by a constant tensor of the same shape (e.g. a dropout mask).
    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        if self.shape(a) != c.shape() {
            return Err(shape_err("mul_const", self.shape(a), c.shape()));
        }
        let data = self
            .data(a)
            .iter()
            .zip(c.data())
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        Ok(self.push(
            Self::new_tensor(shape, data),
            Op::MulConst(a, c.data().to_vec()),
            needs,
        ))
    }

    /// Repeats a length-`n` vector (or `1 x n` matrix) into `rows x n`.
    pub fn broadcast_rows(&mut self, v: Var, rows: usize) -> Result<Var> {
        let shape = self.shape(v);
        let n = match shape {
            [n] | [1, n] => *n,
            _ => return Err(shape_err("broadcast_rows", shape, &[1, 0])),
        };
        let src = self.data(v);
        let mut data = Vec::with_capacity(rows * n);
        for _ in 0..rows {
            data.extend_from_slice(src);
        }
        let needs = self.needs(v);
        Ok(self.push(
            Self::new_tensor(vec![rows, n], data),
            Op::BroadcastRows(v),
            needs,
        ))
    }

    /// `x + b` with `b` broadcast over the rows of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (r, _) = dims2(self.shape(x));
        let bb = self.broadcast_rows(b, r)?;
        self.add(x, bb)
    }

    fn matrix_dims(&self, v: Var, op: &'static str, other: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => Err(shape_err(op, s, self.shape(other))),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, k) = self.matrix_dims(a, "matmul", b)?;
        let (k2, c) = self.matrix_dims(b, "matmul", a)?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; r * c];
        matmul_into(self.data(a), self.data(b), &mut out, r, k, c);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Self::new_tensor(vec![r, c], out), Op::MatMul(a, b), needs))
    }

    /// `a * b^T` without materializing the transpose.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (r, k) = self.matrix_dims(a, "matmul_bt", b)?;
        let (c, k2) = self.matrix_dims(b, "matmul_bt", a)?;
        if k != k2 {
            return Err(shape_err("matmul_bt", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; r * c];
        matmul_bt_into(self.data(a), self.data(b), &mut out, r, k, c);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Self::new_tensor(vec![r, c], out), Op::MatMulBt(a, b), needs))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(a, "transpose", a)?;
        let src = self.data(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let needs = self.needs(a);
        Ok(self.push(Self::new_tensor(vec![c, r], out), Op::Transpose(a), needs))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let data = self.data(a).iter().map(|&x| f(x)).collect();
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        self.push(Self::new_tensor(shape, data), op, needs)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(
            a,
            |x| if x > 0.0 { x } else { slope * x },
            Op::LeakyRelu(a, slope),
        )
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(
            a,
            |x| 0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh()),
            Op::Gelu(a),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, f64::ln, Op::Log(a))
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, f64::sqrt, Op::Sqrt(a))
    }

    /// `max(x, lo)`; the gradient is zero where the clamp is active.
    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        self.unary(a, |x| x.max(lo), Op::ClampMin(a, lo))
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a);
        if !value.all_finite() {
            return Err(Error::NumericDomain { op: "softmax" });
        }
        let (r, c) = value.dims2();
        if c == 0 {
            return Err(Error::Contract("softmax over an empty axis".into()));
        }
        let src = value.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[i * c..(i + 1) * c];
            let mut total = 0.0;
            for (d, &x) in dst.iter_mut().zip(row) {
                *d = (x - max).exp();
                total += *d;
            }
            dst.iter_mut().for_each(|d| *d /= total);
        }
        let shape = self.shape(a).to_vec();
        let needs = self.needs(a);
        Ok(self.push(Self::new_tensor(shape, out), Op::Softmax(a), needs))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of width `d`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, d) = dims2(self.shape(x));
        if self.value(gamma).len() != d || self.value(beta).len() != d {
            return Err(shape_err("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let src = self.data(x);
        let g = self.data(gamma);
        let b = self.data(beta);
        let mut out = vec![0.0; r * d];
        let mut normalized = vec![0.0; r * d];
        let mut inv_std = vec![0.0; r];
        for i in 0..r {
            let row = &src[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = inv;
            for j in 0..d {
                let n = (row[j] - mean) * inv;
                normalized[i * d + j] = n;
                out[i * d + j] = g[j] * n + b[j];
            }
        }
        let shape = self.shape(x).to_vec();
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(
            Self::new_tensor(shape, out),
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            },
            needs,
        ))
    }

    /// Row gather from a `vocab x d` table; the adjoint scatter-adds.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (v, d) = self.matrix_dims(table, "embedding", table)?;
        let src = self.data(table);
        let mut out = Vec::with_capacity(indices.len() * d);
        for &idx in indices {
            if idx >= v {
                return Err(Error::Vocabulary {
                    index: idx,
                    size: v,
                });
            }
            out.extend_from_slice(&src[idx * d..(idx + 1) * d]);
        }
        let needs = self.needs(table);
        Ok(self.push(
            Self::new_tensor(vec![indices.len(), d], out),
            Op::Embedding {
                table,
                indices: indices.to_vec(),
            },
            needs,
        ))
    }

    /// Picks elements by flat row-major index into a vector.
    pub fn gather(&mut self, x: Var, flat_indices: &[usize]) -> Result<Var> {
        let src = self.data(x);
        let mut out = Vec::with_capacity(flat_indices.len());
        for &i in flat_indices {
            match src.get(i) {
                Some(&v) => out.push(v),
                None => {
                    return Err(Error::Contract(format!(
                        "gather index {i} out of range for {} elements",
                        src.len()
                    )))
                }
            }
        }
        let needs = self.needs(x);
        Ok(self.push(
            Self::new_tensor(vec![flat_indices.len()], out),
            Op::Gather {
                x,
                indices: flat_indices.to_vec(),
            },
            needs,
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "slice_cols", x)?;
        if start + len > c {
            return Err(shape_err("slice_cols", self.shape(x), &[start, len]));
        }
        let src = self.data(x);
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let needs = self.needs(x);
        Ok(self.push(
            Self::new_tensor(vec![r, len], out),
            Op::SliceCols { x, start },
            needs,
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "slice_rows", x)?;
        if start + len > r {
            return Err(shape_err("slice_rows", self.shape(x), &[start, len]));
        }
        let out = self.data(x)[start * c..(start + len) * c].to_vec();
        let needs = self.needs(x);
        Ok(self.push(
            Self::new_tensor(vec![len, c], out),
            Op::SliceRows { x, start },
            needs,
        ))
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let (r, _) = self.matrix_dims(first, "concat_cols", first)?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.matrix_dims(p, "concat_cols", first)?;
            if pr != r {
                return Err(shape_err("concat_cols", self.shape(first), self.shape(p)));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(
            Self::new_tensor(vec![r, total], out),
            Op::ConcatCols(parts.to_vec()),
            needs,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.data(a).iter().sum();
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Sum(a), needs)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.data(a).iter().sum::<f64>() / n;
        let needs = self.needs(a);
        self.push(Tensor::scalar(s), Op::Mean(a), needs)
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets`,
    /// evaluated in the numerically stable logit form.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let z = self.data(logits);
        if z.len() != targets.len() {
            return Err(shape_err(
                "bce_with_logits",
                self.shape(logits),
                &[targets.len()],
            ));
        }
        let n = z.len().max(1) as f64;
        let loss = z
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let needs = self.needs(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            needs,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if node.needs_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Adds parameter adjoints into `store`, visiting parameters in tape order.
    pub fn accumulate_param_grads(&self, grads: &Gradients, store: &mut ParamStore) {
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                if let Some(g) = grads.grads[idx].as_deref() {
                    if let Some(dst) = store.get_mut(id).grad_mut() {
                        dst.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                    }
                }
            }
        }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.iter_mut().zip(&contrib).for_each(|(e, c)| *e += c),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                if self.needs(*a) {
                    let c = g.iter().zip(self.data(*b)).map(|(g, y)| g * y).collect();
                    self.accumulate(grads, *a, c);
                }
                if self.needs(*b) {
                    let c = g.iter().zip(self.data(*a)).map(|(g, x)| g * x).collect();
                    self.accumulate(grads, *b, c);
                }
            }
            Op::Scale(a, s) => self.accumulate(grads, *a, g.iter().map(|v| v * s).collect()),
            Op::AddConst(a) => self.accumulate(grads, *a, g.to_vec()),
            Op::MulConst(a, c) => {
                self.accumulate(grads, *a, g.iter().zip(c).map(|(g, c)| g * c).collect())
            }
            Op::BroadcastRows(v) => {
                let n = self.value(*v).len();
                let mut c = vec![0.0; n];
                for row in g.chunks(n) {
                    c.iter_mut().zip(row).for_each(|(c, r)| *c += r);
                }
                self.accumulate(grads, *v, c);
            }
            Op::MatMul(a, b) => {
                let (r, k) = dims2(self.shape(*a));
                let (_, c) = dims2(self.shape(*b));
                if self.needs(*a) {
                    // dA = G * B^T
                    let mut ga = vec![0.0; r * k];
                    matmul_bt_into(g, self.data(*b), &mut ga, r, c, k);
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    // dB = A^T * G
                    let mut gb = vec![0.0; k * c];
                    matmul_at_into(self.data(*a), g, &mut gb, r, k, c);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::MatMulBt(a, b) => {
                let (r, k) = dims2(self.shape(*a));
                let (c, _) = dims2(self.shape(*b));
                if self.needs(*a) {
                    // dA = G * B
                    let mut ga = vec![0.0; r * k];
                    matmul_into(g, self.data(*b), &mut ga, r, c, k);
                    self.accumulate(grads, *a, ga);
                }
                if self.needs(*b) {
                    // dB = G^T * A
                    let mut gb = vec![0.0; c * k];
                    matmul_at_into(g, self.data(*a), &mut gb, r, c, k);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = dims2(self.shape(*a));
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = g[j * r + i];
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::Relu(a) => {
                let c = g
                    .iter()
                    .zip(self.data(*a))
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, c);
            }
            Op::LeakyRelu(a, slope) => {
                let c = g
                    .iter()
                    .zip(self.data(*a))
                    .map(|(g, &x)| if x > 0.0 { *g } else { g * slope })
                    .collect();
                self.accumulate(grads, *a, c);
            }
            Op::Gelu(a) => {
                let c = g
                    .iter()
                    .zip(self.data(*a))
                    .map(|(g, &x)| {
                        let u = GELU_K * (x + GELU_C * x * x * x);
                        let t = u.tanh();
                        let du = GELU_K * (1.0 + 3.0 * GELU_C * x * x);
                        g * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)
                    })
                    .collect();
                self.accumulate(grads, *a, c);
            }
            Op::Sigmoid(a) => {
                let c = g.iter().zip(out).map(|(g, y)| g * y * (1.0 - y)).collect();
                self.accumulate(grads, *a, c);
            }
            Op::Log(a) => {
                let c = g.iter().zip(self.data(*a)).map(|(g, x)| g / x).collect();
                self.accumulate(grads, *a, c);
            }
            Op::Sqrt(a) => {
                let c = g.iter().zip(out).map(|(g, y)| g / (2.0 * y)).collect();
                self.accumulate(grads, *a, c);
            }
            Op::ClampMin(a, lo) => {
                let c = g
                    .iter()
                    .zip(self.data(*a))
                    .map(|(g, &x)| if x >= *lo { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *a, c);
            }
            Op::Softmax(a) => {
                let (r, c) = node.value.dims2();
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    let y = &out[i * c..(i + 1) * c];
                    let gr = &g[i * c..(i + 1) * c];
                    let dot: f64 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..c {
                        ga[i * c + j] = y[j] * (gr[j] - dot);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let (r, d) = node.value.dims2();
                let gm = self.data(*gamma);
                if self.needs(*beta) {
                    let mut gb = vec![0.0; d];
                    for row in g.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(b, v)| *b += v);
                    }
                    self.accumulate(grads, *beta, gb);
                }
                if self.needs(*gamma) {
                    let mut gg = vec![0.0; d];
                    for (row, nrow) in g.chunks(d).zip(normalized.chunks(d)) {
                        for j in 0..d {
                            gg[j] += row[j] * nrow[j];
                        }
                    }
                    self.accumulate(grads, *gamma, gg);
                }
                if self.needs(*x) {
                    let mut gx = vec![0.0; r * d];
                    let dn = d as f64;
                    for i in 0..r {
                        let gr = &g[i * d..(i + 1) * d];
                        let nr = &normalized[i * d..(i + 1) * d];
                        let mut sum_gn = 0.0;
                        let mut sum_gn_n = 0.0;
                        for j in 0..d {
                            let gn = gr[j] * gm[j];
                            sum_gn += gn;
                            sum_gn_n += gn * nr[j];
                        }
                        for j in 0..d {
                            let gn = gr[j] * gm[j];
                            gx[i * d + j] = inv_std[i] / dn * (dn * gn - sum_gn - nr[j] * sum_gn_n);
                        }
                    }
                    self.accumulate(grads, *x, gx);
                }
            }
            Op::Embedding { table, indices } => {
                let (v, d) = dims2(self.shape(*table));
                let mut gt = vec![0.0; v * d];
                for (row, &idx) in indices.iter().enumerate() {
                    let dst = &mut gt[idx * d..(idx + 1) * d];
                    dst.iter_mut()
                        .zip(&g[row * d..(row + 1) * d])
                        .for_each(|(t, s)| *t += s);
                }
                self.accumulate(grads, *table, gt);
            }
            Op::Gather { x, indices } => {
                let mut gx = vec![0.0; self.value(*x).len()];
                for (k, &i) in indices.iter().enumerate() {
                    gx[i] += g[k];
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SliceCols { x, start } => {
                let (r, c) = dims2(self.shape(*x));
                let (_, len) = node.value.dims2();
                let mut gx = vec![0.0; r * c];
                for i in 0..r {
                    gx[i * c + start..i * c + start + len]
                        .copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SliceRows { x, start } => {
                let (r, c) = dims2(self.shape(*x));
                let mut gx = vec![0.0; r * c];
                gx[start * c..start * c + g.len()].copy_from_slice(g);
                self.accumulate(grads, *x, gx);
            }
            Op::ConcatCols(parts) => {
                let (r, total) = node.value.dims2();
                let mut offset = 0;
                for &p in parts {
                    let (_, w) = dims2(self.shape(p));
                    if self.needs(p) {
                        let mut gp = Vec::with_capacity(r * w);
                        for i in 0..r {
                            gp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        self.accumulate(grads, p, gp);
                    }
                    offset += w;
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![g[0]; n]);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len();
                self.accumulate(grads, *a, vec![g[0] / n.max(1) as f64; n]);
            }
            Op::BceWithLogits { logits, targets } => {
                let n = targets.len().max(1) as f64;
                let c = self
                    .data(*logits)
                    .iter()
                    .zip(targets)
                    .map(|(&z, &t)| g[0] * (sigmoid(z) - t) / n)
                    .collect();
                self.accumulate(grads, *logits, c);
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}
