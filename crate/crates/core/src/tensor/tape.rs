//! Recording tape for reverse-mode differentiation.
//!
//! Each operation appends a node holding its output value and a description
//! of how it was produced. Nodes are only ever appended, so every node's
//! inputs precede it and [`Tape::gradient`] can replay the list backwards,
//! visiting each node once.

use std::collections::{BTreeMap, HashSet};

use super::{kernels, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_COEF: f64 = 0.044_715;

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Sigmoid(Var),
    Gelu(Var),
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
        ids: Vec<usize>,
    },
    Transpose(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Mean(Var),
    Sum(Var),
    SquaredNorm(Var),
    AbsDiffSum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// An append-only record of a differentiable computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients returned by [`Tape::gradient`], keyed by the requested vars.
#[derive(Debug, Default)]
pub struct Gradients {
    map: BTreeMap<Var, Tensor>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.map.get(&var)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.map.remove(&var)
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    match data.iter().position(|v| !v.is_finite()) {
        None => Ok(()),
        Some(i) => Err(Error::Numeric {
            op: op.to_string(),
            detail: format!("output value {} at flat index {i}", data[i]),
        }),
    }
}

fn sigmoid(x: f64) -> f64 {
    // Kept inside the open unit interval so downstream logs and mask
    // invariants never see an exact 0 or 1.
    let y = if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    };
    y.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON / 2.0)
}

/// Logistic function, clamped to the open unit interval.
pub fn sigmoid_scalar(x: f64) -> f64 {
    sigmoid(x)
}

fn gelu(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    0.5 * x * (1.0 + (k * (x + GELU_COEF * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let k = (2.0 / std::f64::consts::PI).sqrt();
    let t = (k * (x + GELU_COEF * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * k * (1.0 + 3.0 * GELU_COEF * x * x)
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(Error::dim(op, format!("expected a matrix, got shape {s:?}"))),
    }
}

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

    /// Record an input. It participates in differentiation iff
    /// `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.push_raw(tensor, Op::Leaf, needs_grad)
    }

    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    fn push_raw(&mut self, mut value: Tensor, op: Op, needs_grad: bool) -> Var {
        value.zero_grad();
        value.set_requires_grad(needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Result<Var> {
        check_finite(name, &data)?;
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        Ok(self.push_raw(Tensor::from_parts(shape, data), op, needs_grad))
    }

    fn check_var(&self, var: Var) -> Result<()> {
        if var.0 >= self.nodes.len() {
            return Err(Error::contract(format!("var {} is not on this tape", var.0)));
        }
        Ok(())
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.check_var(a)?;
        self.check_var(b)?;
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::dim(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_var(a)?;
        self.check_var(b)?;
        let (m, k) = matrix_dims("matmul", self.value(a))?;
        let (k2, n) = matrix_dims("matmul", self.value(b))?;
        if k != k2 {
            return Err(Error::dim("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let data = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", vec![m, n], data, Op::MatMul(a, b), &[a, b])
    }

    fn zip_with(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        self.same_shape(name, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.value(a).shape().to_vec();
        self.push(name, shape, data, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with("multiply", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(&mut self, name: &'static str, x: Var, v: Var) -> Result<(usize, usize)> {
        self.check_var(x)?;
        self.check_var(v)?;
        let (r, c) = matrix_dims(name, self.value(x))?;
        let vs = self.value(v).shape();
        if vs != [c] {
            return Err(Error::dim(name, format!("row vector {vs:?} against [{r}, {c}]")));
        }
        Ok((r, c))
    }

    /// `x[i][j] + v[j]`.
    pub fn add_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let (r, c) = self.row_broadcast("add_row", x, v)?;
        let vd = self.value(v).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(c.max(1)) {
            for (a, b) in row.iter_mut().zip(vd) {
                *a += b;
            }
        }
        self.push("add_row", vec![r, c], data, Op::AddRow(x, v), &[x, v])
    }

    /// `x[i][j] · v[j]`, i.e. `x · diag(v)`.
    pub fn mul_row(&mut self, x: Var, v: Var) -> Result<Var> {
        let (r, c) = self.row_broadcast("mul_row", x, v)?;
        let vd = self.value(v).data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(c.max(1)) {
            for (a, b) in row.iter_mut().zip(vd) {
                *a *= b;
            }
        }
        self.push("mul_row", vec![r, c], data, Op::MulRow(x, v), &[x, v])
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        self.check_var(x)?;
        let data = self.value(x).data().iter().map(|v| v * factor).collect();
        let shape = self.value(x).shape().to_vec();
        self.push("scale", shape, data, Op::Scale(x, factor), &[x])
    }

    fn map(&mut self, name: &'static str, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        self.check_var(x)?;
        let data = self.value(x).data().iter().map(|&v| f(v)).collect();
        let shape = self.value(x).shape().to_vec();
        self.push(name, shape, data, op, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.map("sigmoid", x, sigmoid, Op::Sigmoid(x))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.map("gelu", x, gelu, Op::Gelu(x))
    }

    /// Row-wise softmax over a matrix.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, false)
    }

    /// Row-wise softmax over a square matrix where row `i` only sees columns
    /// `0..=i`; masked entries are exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        self.softmax_impl(x, true)
    }

    fn softmax_impl(&mut self, x: Var, causal: bool) -> Result<Var> {
        self.check_var(x)?;
        let (r, c) = matrix_dims("softmax", self.value(x))?;
        if causal && r != c {
            return Err(Error::dim("softmax", format!("causal mask needs a square matrix, got [{r}, {c}]")));
        }
        let src = self.value(x).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let width = if causal { i + 1 } else { c };
            let row = &src[i * c..i * c + width];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut data[i * c..i * c + width];
            let mut total = 0.0;
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - max).exp();
                total += *o;
            }
            for o in out.iter_mut() {
                *o /= total;
            }
        }
        self.push("softmax", vec![r, c], data, Op::Softmax(x), &[x])
    }

    /// Row-wise layer normalization with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (r, c) = self.row_broadcast("layer_norm", x, gamma)?;
        self.row_broadcast("layer_norm", x, beta)?;
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut normalized = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                normalized[i * c + j] = h;
                data[i * c + j] = h * g[j] + b[j];
            }
        }
        let op = Op::LayerNorm {
            x,
            gamma,
            beta,
            normalized,
            inv_std,
        };
        self.push("layer_norm", vec![r, c], data, op, &[x, gamma, beta])
    }

    /// Gather rows of `table` by index. Differentiable in `table` only.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        self.check_var(table)?;
        let (vocab, d) = matrix_dims("embedding", self.value(table))?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::dim("embedding", format!("index {bad} outside table of {vocab} rows")));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let op = Op::Embedding {
            table,
            ids: ids.to_vec(),
        };
        self.push("embedding", vec![ids.len(), d], data, op, &[table])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.check_var(x)?;
        let (r, c) = matrix_dims("transpose", self.value(x))?;
        let data = kernels::transpose(self.value(x).data(), r, c);
        self.push("transpose", vec![c, r], data, Op::Transpose(x), &[x])
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        self.check_var(x)?;
        let (r, c) = matrix_dims("slice", self.value(x))?;
        if start + len > c {
            return Err(Error::dim("slice", format!("columns {start}..{} of {c}", start + len)));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        self.push("slice", vec![r, len], data, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::dim("concat", "no inputs"))?;
        for &p in parts {
            self.check_var(p)?;
        }
        let (r, _) = matrix_dims("concat", self.value(first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = matrix_dims("concat", self.value(p))?;
            if pr != r {
                return Err(Error::dim("concat", format!("row counts {r} and {pr}")));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push("concat", vec![r, total], data, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check_var(x)?;
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(Error::dim("mean", "empty tensor"));
        }
        let v = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", vec![], vec![v], Op::Mean(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check_var(x)?;
        let v = self.value(x).data().iter().sum::<f64>();
        self.push("sum", vec![], vec![v], Op::Sum(x), &[x])
    }

    /// `Σ x²`, the squared Frobenius norm.
    pub fn squared_norm(&mut self, x: Var) -> Result<Var> {
        self.check_var(x)?;
        let v = self.value(x).data().iter().map(|a| a * a).sum::<f64>();
        self.push("squared_frobenius_norm", vec![], vec![v], Op::SquaredNorm(x), &[x])
    }

    /// `Σ_n |x[n+1] − x[n]|` over a vector.
    pub fn abs_diff_sum(&mut self, x: Var) -> Result<Var> {
        self.check_var(x)?;
        let t = self.value(x);
        if t.shape().len() != 1 {
            return Err(Error::dim("absolute_difference_sum", format!("expected a vector, got {:?}", t.shape())));
        }
        let v = t.data().windows(2).map(|w| (w[1] - w[0]).abs()).sum::<f64>();
        self.push("absolute_difference_sum", vec![], vec![v], Op::AbsDiffSum(x), &[x])
    }

    /// Mean next-token cross-entropy of row-wise logits against targets.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.check_var(logits)?;
        let (r, c) = matrix_dims("cross_entropy", self.value(logits))?;
        if targets.len() != r || r == 0 {
            return Err(Error::dim("cross_entropy", format!("{} targets for {r} rows", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= c) {
            return Err(Error::dim("cross_entropy", format!("target {bad} outside {c} classes")));
        }
        let src = self.value(logits).data();
        let mut probs = vec![0.0; r * c];
        let mut total = 0.0;
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let out = &mut probs[i * c..(i + 1) * c];
            let mut z = 0.0;
            for (o, &v) in out.iter_mut().zip(row) {
                *o = (v - max).exp();
                z += *o;
            }
            for o in out.iter_mut() {
                *o /= z;
            }
            total += max + z.ln() - row[targets[i]];
        }
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
        };
        self.push("cross_entropy", vec![], vec![total / r as f64], op, &[logits])
    }

    /// Reverse-mode gradient of a scalar `loss` with respect to `wrt`.
    ///
    /// Requested vars that do not influence `loss` get a zero gradient.
    pub fn gradient(&self, loss: Var, wrt: &[Var]) -> Result<Gradients> {
        self.check_var(loss)?;
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "gradient needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        for &w in wrt {
            self.check_var(w)?;
            if !self.nodes[w.0].needs_grad {
                return Err(Error::contract(format!("var {} does not require a gradient", w.0)));
            }
        }
        let wanted: HashSet<usize> = wrt.iter().map(|v| v.0).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        let mut out = Gradients::default();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![1.0]);
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            if wanted.contains(&idx) {
                out.map.insert(Var(idx), Tensor::from_parts(node.value.shape().to_vec(), g));
            }
        }
        for &w in wrt {
            out.map
                .entry(w)
                .or_insert_with(|| Tensor::zeros(self.value(w).shape().to_vec()));
        }
        Ok(out)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backward_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, contrib: Vec<f64>| match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contrib) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        };
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if self.wants(*a) {
                    let bt = kernels::transpose(bv.data(), k, n);
                    acc(*a, kernels::matmul(g, &bt, m, n, k));
                }
                if self.wants(*b) {
                    let at = kernels::transpose(av.data(), m, k);
                    acc(*b, kernels::matmul(&at, g, k, m, n));
                }
            }
            Op::Add(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.to_vec());
                }
                if self.wants(*b) {
                    acc(*b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.to_vec());
                }
                if self.wants(*b) {
                    acc(*b, g.iter().map(|v| -v).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.wants(*a) {
                    acc(*a, g.iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect());
                }
                if self.wants(*b) {
                    acc(*b, g.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect());
                }
            }
            Op::AddRow(x, v) => {
                let c = self.value(*v).numel();
                if self.wants(*x) {
                    acc(*x, g.to_vec());
                }
                if self.wants(*v) {
                    acc(*v, column_sums(g, c));
                }
            }
            Op::MulRow(x, v) => {
                let c = self.value(*v).numel();
                let vd = self.value(*v).data();
                if self.wants(*x) {
                    let mut dx = g.to_vec();
                    for row in dx.chunks_exact_mut(c.max(1)) {
                        for (d, s) in row.iter_mut().zip(vd) {
                            *d *= s;
                        }
                    }
                    acc(*x, dx);
                }
                if self.wants(*v) {
                    let xd = self.value(*x).data();
                    let prod: Vec<f64> = g.iter().zip(xd).map(|(a, b)| a * b).collect();
                    acc(*v, column_sums(&prod, c));
                }
            }
            Op::Scale(x, f) => acc(*x, g.iter().map(|v| v * f).collect()),
            Op::Sigmoid(x) => acc(*x, g.iter().zip(y).map(|(d, s)| d * s * (1.0 - s)).collect()),
            Op::Gelu(x) => {
                let xd = self.value(*x).data();
                acc(*x, g.iter().zip(xd).map(|(d, &v)| d * gelu_grad(v)).collect());
            }
            Op::Softmax(x) => {
                let c = node.value.cols();
                let mut dx = vec![0.0; y.len()];
                for ((dr, yr), gr) in dx.chunks_exact_mut(c).zip(y.chunks_exact(c)).zip(g.chunks_exact(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yv * (gv - dot);
                    }
                }
                acc(*x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let c = self.value(*gamma).numel();
                if self.wants(*gamma) {
                    let prod: Vec<f64> = g.iter().zip(normalized).map(|(a, b)| a * b).collect();
                    acc(*gamma, column_sums(&prod, c));
                }
                if self.wants(*beta) {
                    acc(*beta, column_sums(g, c));
                }
                if self.wants(*x) {
                    let gd = self.value(*gamma).data();
                    let mut dx = vec![0.0; g.len()];
                    for i in 0..inv_std.len() {
                        let gr = &g[i * c..(i + 1) * c];
                        let hr = &normalized[i * c..(i + 1) * c];
                        let dh: Vec<f64> = gr.iter().zip(gd).map(|(a, b)| a * b).collect();
                        let mean_dh = dh.iter().sum::<f64>() / c as f64;
                        let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / c as f64;
                        for j in 0..c {
                            dx[i * c + j] = inv_std[i] * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                        }
                    }
                    acc(*x, dx);
                }
            }
            Op::Embedding { table, ids } => {
                let tv = self.value(*table);
                let d = tv.cols();
                let mut dt = vec![0.0; tv.numel()];
                for (t, &i) in ids.iter().enumerate() {
                    for (a, b) in dt[i * d..(i + 1) * d].iter_mut().zip(&g[t * d..(t + 1) * d]) {
                        *a += b;
                    }
                }
                acc(*table, dt);
            }
            Op::Transpose(x) => {
                let (r, c) = (node.value.rows(), node.value.cols());
                acc(*x, kernels::transpose(g, r, c));
            }
            Op::SliceCols { x, start } => {
                let xv = self.value(*x);
                let (r, c) = (xv.rows(), xv.cols());
                let len = node.value.cols();
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
                }
                acc(*x, dx);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let r = node.value.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).cols();
                    if self.wants(p) {
                        let mut dp = Vec::with_capacity(r * w);
                        for i in 0..r {
                            dp.extend_from_slice(&g[i * total + offset..i * total + offset + w]);
                        }
                        acc(p, dp);
                    }
                    offset += w;
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                acc(*x, vec![g[0] / n as f64; n]);
            }
            Op::Sum(x) => acc(*x, vec![g[0]; self.value(*x).numel()]),
            Op::SquaredNorm(x) => acc(*x, self.value(*x).data().iter().map(|v| 2.0 * v * g[0]).collect()),
            Op::AbsDiffSum(x) => {
                let xd = self.value(*x).data();
                let mut dx = vec![0.0; xd.len()];
                for n in 0..xd.len().saturating_sub(1) {
                    let diff = xd[n + 1] - xd[n];
                    let s = if diff > 0.0 {
                        1.0
                    } else if diff < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    dx[n + 1] += s * g[0];
                    dx[n] -= s * g[0];
                }
                acc(*x, dx);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let r = targets.len();
                let c = probs.len() / r;
                let scale = g[0] / r as f64;
                let mut dx: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                for (i, &t) in targets.iter().enumerate() {
                    dx[i * c + t] -= scale;
                }
                acc(*logits, dx);
            }
        }
    }
}

fn column_sums(g: &[f64], cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; cols];
    if cols == 0 {
        return out;
    }
    for row in g.chunks_exact(cols) {
        for (o, v) in out.iter_mut().zip(row) {
            *o += v;
        }
    }
    out
}
