//! Append-only reverse-mode tape.
//!
//! Every op pushes one node whose inputs have strictly smaller indices, so
//! reverse index order is a valid topological order for backpropagation.
//! Gradients accumulate additively, which makes repeated use of a variable
//! (weight tying, residual reuse) correct without special cases.
//!
//! Ops that can see gradient flow record a backward rule; ops fed only by
//! constants degrade to leaves so backward skips them.

use super::kernels;
use super::{Result, Tensor, TensorError};

/// Handle to a tape node. Only meaningful for the tape that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Rule {
    Leaf,
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: f64 },
    Tanh { a: Var },
    Exp { a: Var },
    Ln { a: Var },
    Matmul { a: Var, b: Var },
    Transpose { a: Var },
    Reshape { a: Var },
    SoftmaxRows { a: Var },
    LogSoftmaxRows { a: Var },
    AddRow { a: Var, row: Var },
    MulRow { a: Var, row: Var },
    SumAll { a: Var },
    MeanRows { a: Var },
    LayerNormRows { a: Var, gain: Var, bias: Var, eps: f64 },
    ConcatRows { parts: Vec<Var> },
    SliceRows { a: Var, start: usize },
    ConcatCols { parts: Vec<Var> },
    SliceCols { a: Var, start: usize },
    EmbedRows { table: Var, ids: Vec<usize> },
    PairwiseSumRows { a: Var, b: Var },
    LogAddExp { a: Var, b: Var },
    Get { a: Var, idx: usize },
    SumVars { parts: Vec<Var> },
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f64>>,
    needs_grad: bool,
    rule: Rule,
}

pub struct Tape {
    nodes: Vec<Node>,
    done_backward: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            done_backward: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input: no gradient is ever tracked for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, false, Rule::Leaf)
    }

    /// Trainable input: participates in backward.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, true, Rule::Leaf)
    }

    pub fn scalar(&mut self, v: f64) -> Var {
        self.leaf(Tensor::scalar(v))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last backward pass. `None` for constants; zero for
    /// parameters the loss never touched.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let n = &self.nodes[v.0];
        if !n.needs_grad {
            return None;
        }
        Some(match &n.grad {
            Some(g) => Tensor::new(n.value.shape().to_vec(), g.clone())
                .expect("grad shape tracks value shape"),
            None => Tensor::zeros(n.value.shape().to_vec()),
        })
    }

    fn push(&mut self, value: Tensor, needs_grad: bool, rule: Rule) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            needs_grad,
            rule,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn record(&mut self, value: Tensor, rule: Rule) -> Var {
        let needs = match &rule {
            Rule::Leaf => false,
            Rule::Add { a, b }
            | Rule::Sub { a, b }
            | Rule::Mul { a, b }
            | Rule::Matmul { a, b }
            | Rule::PairwiseSumRows { a, b }
            | Rule::LogAddExp { a, b } => self.needs(*a) || self.needs(*b),
            Rule::Scale { a, .. }
            | Rule::Tanh { a }
            | Rule::Exp { a }
            | Rule::Ln { a }
            | Rule::Transpose { a }
            | Rule::Reshape { a }
            | Rule::SoftmaxRows { a }
            | Rule::LogSoftmaxRows { a }
            | Rule::SumAll { a }
            | Rule::MeanRows { a }
            | Rule::SliceRows { a, .. }
            | Rule::SliceCols { a, .. }
            | Rule::Get { a, .. } => self.needs(*a),
            Rule::AddRow { a, row } | Rule::MulRow { a, row } => {
                self.needs(*a) || self.needs(*row)
            }
            Rule::LayerNormRows { a, gain, bias, .. } => {
                self.needs(*a) || self.needs(*gain) || self.needs(*bias)
            }
            Rule::EmbedRows { table, .. } => self.needs(*table),
            Rule::ConcatRows { parts } | Rule::ConcatCols { parts } | Rule::SumVars { parts } => {
                parts.iter().any(|p| self.needs(*p))
            }
        };
        let rule = if needs { rule } else { Rule::Leaf };
        self.push(value, needs, rule)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(TensorError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        Ok(self.record(out, Rule::Add { a, b }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        Ok(self.record(out, Rule::Sub { a, b }))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        Ok(self.record(out, Rule::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        self.record(out, Rule::Scale { a, c })
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|x| x.tanh()).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        self.record(out, Rule::Tanh { a })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|x| x.exp()).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        self.record(out, Rule::Exp { a })
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let data = self.value(a).data().iter().map(|x| x.ln()).collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        self.record(out, Rule::Ln { a })
    }

    pub fn logaddexp(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("logaddexp", a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| kernels::logaddexp(x, y))
            .collect();
        let out = Tensor::new(self.value(a).shape().to_vec(), data).unwrap();
        Ok(self.record(out, Rule::LogAddExp { a, b }))
    }

    // ---- linear algebra ----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut data = vec![0.0; m * n];
        kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n, &mut data);
        let out = Tensor::new(vec![m, n], data).unwrap();
        Ok(self.record(out, Rule::Matmul { a, b }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let sa = self.value(a).shape();
        if sa.len() != 2 {
            return Err(TensorError::ShapeMismatch {
                op: "transpose",
                left: sa.to_vec(),
                right: vec![],
            });
        }
        let (r, c) = (sa[0], sa[1]);
        let src = self.value(a).data();
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let out = Tensor::new(vec![c, r], data).unwrap();
        Ok(self.record(out, Rule::Transpose { a }))
    }

    /// Reinterprets the data under a new shape of equal element count.
    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(a);
        if shape.iter().product::<usize>() != t.numel() {
            return Err(TensorError::BadShape {
                shape,
                len: t.numel(),
            });
        }
        let out = Tensor::new(shape, t.data().to_vec()).unwrap();
        Ok(self.record(out, Rule::Reshape { a }))
    }

    // ---- row-structured ops (last axis = row) ----

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        if !self.value(a).all_finite() {
            return Err(TensorError::NonFinite("softmax input"));
        }
        let mut out = self.value(a).clone();
        let w = out.last_dim();
        for chunk in out.data_mut().chunks_mut(w) {
            kernels::softmax_row(chunk);
        }
        Ok(self.record(out, Rule::SoftmaxRows { a }))
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        if !self.value(a).all_finite() {
            return Err(TensorError::NonFinite("log-softmax input"));
        }
        let mut out = self.value(a).clone();
        let w = out.last_dim();
        for chunk in out.data_mut().chunks_mut(w) {
            kernels::log_softmax_row(chunk);
        }
        Ok(self.record(out, Rule::LogSoftmaxRows { a }))
    }

    fn check_row_arg(&self, op: &'static str, a: Var, row: Var) -> Result<usize> {
        let w = self.value(a).last_dim();
        let rv = self.value(row);
        if rv.numel() != w || rv.last_dim() != w {
            return Err(TensorError::ShapeMismatch {
                op,
                left: self.value(a).shape().to_vec(),
                right: rv.shape().to_vec(),
            });
        }
        Ok(w)
    }

    /// Broadcast-add a length-C vector to every row of a `R x C` tensor.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let w = self.check_row_arg("add_row", a, row)?;
        let mut out = self.value(a).clone();
        let rdata: Vec<f64> = self.value(row).data().to_vec();
        for chunk in out.data_mut().chunks_mut(w) {
            for (o, r) in chunk.iter_mut().zip(&rdata) {
                *o += r;
            }
        }
        Ok(self.record(out, Rule::AddRow { a, row }))
    }

    /// Broadcast-multiply every row of a `R x C` tensor by a length-C vector.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let w = self.check_row_arg("mul_row", a, row)?;
        let mut out = self.value(a).clone();
        let rdata: Vec<f64> = self.value(row).data().to_vec();
        for chunk in out.data_mut().chunks_mut(w) {
            for (o, r) in chunk.iter_mut().zip(&rdata) {
                *o *= r;
            }
        }
        Ok(self.record(out, Rule::MulRow { a, row }))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.value(a).data().iter().sum();
        self.record(Tensor::scalar(s), Rule::SumAll { a })
    }

    /// Column means: `R x C -> C`. Used for temporal pooling.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (r, c) = (t.row_count(), t.last_dim());
        if r == 0 {
            return Err(TensorError::BadShape {
                shape: t.shape().to_vec(),
                len: 0,
            });
        }
        let mut out = vec![0.0; c];
        for i in 0..r {
            for (o, v) in out.iter_mut().zip(t.row(i)) {
                *o += v;
            }
        }
        for o in out.iter_mut() {
            *o /= r as f64;
        }
        let out = Tensor::new(vec![c], out).unwrap();
        Ok(self.record(out, Rule::MeanRows { a }))
    }

    pub fn layer_norm_rows(&mut self, a: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let w = self.check_row_arg("layer_norm", a, gain)?;
        self.check_row_arg("layer_norm", a, bias)?;
        let src = self.value(a).clone();
        let g: Vec<f64> = self.value(gain).data().to_vec();
        let b: Vec<f64> = self.value(bias).data().to_vec();
        let mut out = Tensor::zeros(src.shape().to_vec());
        for (i, chunk) in out.data_mut().chunks_mut(w).enumerate() {
            kernels::layer_norm_row(src.row(i), &g, &b, eps, chunk);
        }
        Ok(self.record(out, Rule::LayerNormRows { a, gain, bias, eps }))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Contract("concat_rows of zero parts".into()));
        }
        let w = self.value(parts[0]).last_dim();
        let mut rows = 0;
        for &p in parts {
            if self.value(p).last_dim() != w {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_rows",
                    left: self.value(parts[0]).shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
            rows += self.value(p).row_count();
        }
        let mut data = Vec::with_capacity(rows * w);
        for &p in parts {
            data.extend_from_slice(self.value(p).data());
        }
        let out = Tensor::new(vec![rows, w], data).unwrap();
        Ok(self.record(
            out,
            Rule::ConcatRows {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, w) = (t.row_count(), t.last_dim());
        if start + len > r {
            return Err(TensorError::IndexOutOfBounds {
                what: "row slice",
                index: start + len,
                size: r,
            });
        }
        let data = t.data()[start * w..(start + len) * w].to_vec();
        let out = Tensor::new(vec![len, w], data).unwrap();
        Ok(self.record(out, Rule::SliceRows { a, start }))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(TensorError::Contract("concat_cols of zero parts".into()));
        }
        let rows = self.value(parts[0]).row_count();
        let mut w = 0;
        for &p in parts {
            if self.value(p).row_count() != rows {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.value(parts[0]).shape().to_vec(),
                    right: self.value(p).shape().to_vec(),
                });
            }
            w += self.value(p).last_dim();
        }
        let mut data = Vec::with_capacity(rows * w);
        for i in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        let out = Tensor::new(vec![rows, w], data).unwrap();
        Ok(self.record(
            out,
            Rule::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (r, w) = (t.row_count(), t.last_dim());
        if start + len > w {
            return Err(TensorError::IndexOutOfBounds {
                what: "column slice",
                index: start + len,
                size: w,
            });
        }
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&t.row(i)[start..start + len]);
        }
        let out = Tensor::new(vec![r, len], data).unwrap();
        Ok(self.record(out, Rule::SliceCols { a, start }))
    }

    /// Row lookup: `table[V x D]`, ids -> `N x D`.
    pub fn embed_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (v, d) = (t.row_count(), t.last_dim());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(TensorError::IndexOutOfBounds {
                    what: "embedding row",
                    index: id,
                    size: v,
                });
            }
            data.extend_from_slice(t.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], data).unwrap();
        Ok(self.record(
            out,
            Rule::EmbedRows {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    /// All-pairs row sums: `T x C` and `U x C` -> `(T*U) x C`, row `t*U + u`
    /// holding `a[t] + b[u]`. Builds the transducer joint lattice without
    /// materializing broadcast copies.
    pub fn pairwise_sum_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let c = ta.last_dim();
        if tb.last_dim() != c {
            return Err(TensorError::ShapeMismatch {
                op: "pairwise_sum_rows",
                left: ta.shape().to_vec(),
                right: tb.shape().to_vec(),
            });
        }
        let (tr, ur) = (ta.row_count(), tb.row_count());
        let mut data = Vec::with_capacity(tr * ur * c);
        for t in 0..tr {
            let arow = ta.row(t);
            for u in 0..ur {
                let brow = tb.row(u);
                for i in 0..c {
                    data.push(arow[i] + brow[i]);
                }
            }
        }
        let out = Tensor::new(vec![tr * ur, c], data).unwrap();
        Ok(self.record(out, Rule::PairwiseSumRows { a, b }))
    }

    /// Scalar pick by flat index.
    pub fn get(&mut self, a: Var, idx: usize) -> Result<Var> {
        let t = self.value(a);
        if idx >= t.numel() {
            return Err(TensorError::IndexOutOfBounds {
                what: "flat index",
                index: idx,
                size: t.numel(),
            });
        }
        let v = t.data()[idx];
        Ok(self.record(Tensor::scalar(v), Rule::Get { a, idx }))
    }

    /// Sum of scalar variables, accumulated in argument order.
    pub fn sum_vars(&mut self, parts: &[Var]) -> Result<Var> {
        let mut s = 0.0;
        for &p in parts {
            let t = self.value(p);
            if !t.is_scalar() {
                return Err(TensorError::NonScalarLoss(t.shape().to_vec()));
            }
            s += t.value();
        }
        Ok(self.record(
            Tensor::scalar(s),
            Rule::SumVars {
                parts: parts.to_vec(),
            },
        ))
    }

    // ---- backward ----

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.done_backward {
            return Err(TensorError::DoubleBackward);
        }
        let lt = &self.nodes[loss.0].value;
        if !lt.is_scalar() {
            return Err(TensorError::NonScalarLoss(lt.shape().to_vec()));
        }
        if !lt.value().is_finite() {
            return Err(TensorError::NonFinite("loss"));
        }
        self.done_backward = true;
        if !self.nodes[loss.0].needs_grad {
            return Ok(()); // constant loss: all gradients are zero
        }
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            if !node.needs_grad || node.grad.is_none() {
                continue;
            }
            let gout = node.grad.as_ref().unwrap();
            apply_rule(before, &node.rule, &node.value, gout);
        }
        Ok(())
    }
}

fn add_to(before: &mut [Node], v: Var, f: impl FnOnce(&mut [f64])) {
    let n = &mut before[v.0];
    if !n.needs_grad {
        return;
    }
    let numel = n.value.numel();
    let g = n.grad.get_or_insert_with(|| vec![0.0; numel]);
    f(g);
}

fn apply_rule(before: &mut [Node], rule: &Rule, value: &Tensor, gout: &[f64]) {
    match rule {
        Rule::Leaf => {}
        Rule::Add { a, b } => {
            add_to(before, *a, |g| {
                for (g, d) in g.iter_mut().zip(gout) {
                    *g += d;
                }
            });
            add_to(before, *b, |g| {
                for (g, d) in g.iter_mut().zip(gout) {
                    *g += d;
                }
            });
        }
        Rule::Sub { a, b } => {
            add_to(before, *a, |g| {
                for (g, d) in g.iter_mut().zip(gout) {
                    *g += d;
                }
            });
            add_to(before, *b, |g| {
                for (g, d) in g.iter_mut().zip(gout) {
                    *g -= d;
                }
            });
        }
        Rule::Mul { a, b } => {
            let av = before[a.0].value.data().to_vec();
            let bv = before[b.0].value.data().to_vec();
            add_to(before, *a, |g| {
                for ((g, d), y) in g.iter_mut().zip(gout).zip(&bv) {
                    *g += d * y;
                }
            });
            add_to(before, *b, |g| {
                for ((g, d), x) in g.iter_mut().zip(gout).zip(&av) {
                    *g += d * x;
                }
            });
        }
        Rule::Scale { a, c } => {
            add_to(before, *a, |g| {
                for (g, d) in g.iter_mut().zip(gout) {
                    *g += d * c;
                }
            });
        }
        Rule::Tanh { a } => {
            let y = value.data();
            add_to(before, *a, |g| {
                for ((g, d), yv) in g.iter_mut().zip(gout).zip(y) {
                    *g += d * (1.0 - yv * yv);
                }
            });
        }
        Rule::Exp { a } => {
            let y = value.data();
            add_to(before, *a, |g| {
                for ((g, d), yv) in g.iter_mut().zip(gout).zip(y) {
                    *g += d * yv;
                }
            });
        }
        Rule::Ln { a } => {
            let x = before[a.0].value.data().to_vec();
            add_to(before, *a, |g| {
                for ((g, d), xv) in g.iter_mut().zip(gout).zip(&x) {
                    *g += d / xv;
                }
            });
        }
        Rule::Matmul { a, b } => {
            let (m, k) = {
                let s = before[a.0].value.shape();
                (s[0], s[1])
            };
            let n = before[b.0].value.shape()[1];
            // dA = dC * B^T
            let bt = transpose_data(before[b.0].value.data(), k, n);
            let mut da = vec![0.0; m * k];
            kernels::matmul(gout, &bt, m, n, k, &mut da);
            add_to(before, *a, |g| {
                for (g, d) in g.iter_mut().zip(&da) {
                    *g += d;
                }
            });
            // dB = A^T * dC
            let at = transpose_data(before[a.0].value.data(), m, k);
            let mut db = vec![0.0; k * n];
            kernels::matmul(&at, gout, k, m, n, &mut db);
            add_to(before, *b, |g| {
                for (g, d) in g.iter_mut().zip(&db) {
                    *g += d;
                }
            });
        }
        Rule::Transpose { a } => {
            let s = before[a.0].value.shape().to_vec();
            let (r, c) = (s[0], s[1]);
            add_to(before, *a, |g| {
                for i in 0..r {
                    for j in 0..c {
                        g[i * c + j] += gout[j * r + i];
                    }
                }
            });
        }
        Rule::Reshape { a } => {
            add_to(before, *a, |g| {
                for (gi, d) in g.iter_mut().zip(gout) {
                    *gi += d;
                }
            });
        }
        Rule::SoftmaxRows { a } => {
            let w = value.last_dim();
            let y = value.data();
            add_to(before, *a, |g| {
                for r in 0..value.numel() / w {
                    let yr = &y[r * w..(r + 1) * w];
                    let dr = &gout[r * w..(r + 1) * w];
                    let s: f64 = yr.iter().zip(dr).map(|(y, d)| y * d).sum();
                    let gr = &mut g[r * w..(r + 1) * w];
                    for i in 0..w {
                        gr[i] += yr[i] * (dr[i] - s);
                    }
                }
            });
        }
        Rule::LogSoftmaxRows { a } => {
            let w = value.last_dim();
            let y = value.data();
            add_to(before, *a, |g| {
                for r in 0..value.numel() / w {
                    let yr = &y[r * w..(r + 1) * w];
                    let dr = &gout[r * w..(r + 1) * w];
                    let s: f64 = dr.iter().sum();
                    let gr = &mut g[r * w..(r + 1) * w];
                    for i in 0..w {
                        gr[i] += dr[i] - yr[i].exp() * s;
                    }
                }
            });
        }
        Rule::AddRow { a, row } => {
            let w = value.last_dim();
            add_to(before, *a, |g| {
                for (g, d) in g.iter_mut().zip(gout) {
                    *g += d;
                }
            });
            add_to(before, *row, |g| {
                for chunk in gout.chunks(w) {
                    for (g, d) in g.iter_mut().zip(chunk) {
                        *g += d;
                    }
                }
            });
        }
        Rule::MulRow { a, row } => {
            let w = value.last_dim();
            let av = before[a.0].value.data().to_vec();
            let rv = before[row.0].value.data().to_vec();
            add_to(before, *a, |g| {
                for (r, chunk) in gout.chunks(w).enumerate() {
                    let gr = &mut g[r * w..(r + 1) * w];
                    for i in 0..w {
                        gr[i] += chunk[i] * rv[i];
                    }
                }
            });
            add_to(before, *row, |g| {
                for (r, chunk) in gout.chunks(w).enumerate() {
                    let ar = &av[r * w..(r + 1) * w];
                    for i in 0..w {
                        g[i] += chunk[i] * ar[i];
                    }
                }
            });
        }
        Rule::SumAll { a } => {
            let d = gout[0];
            add_to(before, *a, |g| {
                for g in g.iter_mut() {
                    *g += d;
                }
            });
        }
        Rule::MeanRows { a } => {
            let c = value.numel();
            let rows = before[a.0].value.numel() / c;
            let inv = 1.0 / rows as f64;
            add_to(before, *a, |g| {
                for chunk in g.chunks_mut(c) {
                    for (g, d) in chunk.iter_mut().zip(gout) {
                        *g += d * inv;
                    }
                }
            });
        }
        Rule::LayerNormRows { a, gain, bias, eps } => {
            let w = value.last_dim();
            let rows = value.numel() / w;
            let x = before[a.0].value.data().to_vec();
            let gn = before[gain.0].value.data().to_vec();
            // Recompute per-row statistics; cheaper than caching them on the
            // node for every forward call.
            let mut dx = vec![0.0; x.len()];
            let mut dgain = vec![0.0; w];
            let mut dbias = vec![0.0; w];
            for r in 0..rows {
                let xr = &x[r * w..(r + 1) * w];
                let dr = &gout[r * w..(r + 1) * w];
                let mean: f64 = xr.iter().sum::<f64>() / w as f64;
                let var: f64 = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / w as f64;
                let denom = (var + eps).sqrt();
                let xhat: Vec<f64> = xr.iter().map(|v| (v - mean) / denom).collect();
                let dxhat: Vec<f64> = dr.iter().zip(&gn).map(|(d, g)| d * g).collect();
                let m1: f64 = dxhat.iter().sum::<f64>() / w as f64;
                let m2: f64 = dxhat.iter().zip(&xhat).map(|(d, h)| d * h).sum::<f64>() / w as f64;
                for i in 0..w {
                    dx[r * w + i] = (dxhat[i] - m1 - xhat[i] * m2) / denom;
                    dgain[i] += dr[i] * xhat[i];
                    dbias[i] += dr[i];
                }
            }
            add_to(before, *a, |g| {
                for (g, d) in g.iter_mut().zip(&dx) {
                    *g += d;
                }
            });
            add_to(before, *gain, |g| {
                for (g, d) in g.iter_mut().zip(&dgain) {
                    *g += d;
                }
            });
            add_to(before, *bias, |g| {
                for (g, d) in g.iter_mut().zip(&dbias) {
                    *g += d;
                }
            });
        }
        Rule::ConcatRows { parts } => {
            let mut off = 0;
            for &p in parts {
                let n = before[p.0].value.numel();
                let seg = &gout[off..off + n];
                add_to(before, p, |g| {
                    for (g, d) in g.iter_mut().zip(seg) {
                        *g += d;
                    }
                });
                off += n;
            }
        }
        Rule::SliceRows { a, start } => {
            let w = value.last_dim();
            add_to(before, *a, |g| {
                for (i, d) in gout.iter().enumerate() {
                    g[start * w + i] += d;
                }
            });
        }
        Rule::ConcatCols { parts } => {
            let rows = value.numel() / value.last_dim();
            let total_w = value.last_dim();
            let mut off = 0;
            for &p in parts {
                let w = before[p.0].value.last_dim();
                add_to(before, p, |g| {
                    for r in 0..rows {
                        let src = &gout[r * total_w + off..r * total_w + off + w];
                        let dst = &mut g[r * w..(r + 1) * w];
                        for (g, d) in dst.iter_mut().zip(src) {
                            *g += d;
                        }
                    }
                });
                off += w;
            }
        }
        Rule::SliceCols { a, start } => {
            let w = value.last_dim();
            let rows = value.numel() / w;
            let src_w = before[a.0].value.last_dim();
            add_to(before, *a, |g| {
                for r in 0..rows {
                    for i in 0..w {
                        g[r * src_w + start + i] += gout[r * w + i];
                    }
                }
            });
        }
        Rule::EmbedRows { table, ids } => {
            let d = value.last_dim();
            add_to(before, *table, |g| {
                for (n, &id) in ids.iter().enumerate() {
                    let src = &gout[n * d..(n + 1) * d];
                    let dst = &mut g[id * d..(id + 1) * d];
                    for (g, s) in dst.iter_mut().zip(src) {
                        *g += s;
                    }
                }
            });
        }
        Rule::PairwiseSumRows { a, b } => {
            let c = value.last_dim();
            let tr = before[a.0].value.row_count();
            let ur = before[b.0].value.row_count();
            add_to(before, *a, |g| {
                for t in 0..tr {
                    for u in 0..ur {
                        let src = &gout[(t * ur + u) * c..(t * ur + u + 1) * c];
                        let dst = &mut g[t * c..(t + 1) * c];
                        for (g, d) in dst.iter_mut().zip(src) {
                            *g += d;
                        }
                    }
                }
            });
            add_to(before, *b, |g| {
                for t in 0..tr {
                    for u in 0..ur {
                        let src = &gout[(t * ur + u) * c..(t * ur + u + 1) * c];
                        let dst = &mut g[u * c..(u + 1) * c];
                        for (g, d) in dst.iter_mut().zip(src) {
                            *g += d;
                        }
                    }
                }
            });
        }
        Rule::LogAddExp { a, b } => {
            let av = before[a.0].value.data().to_vec();
            let bv = before[b.0].value.data().to_vec();
            let y = value.data();
            add_to(before, *a, |g| {
                for i in 0..y.len() {
                    if av[i] != f64::NEG_INFINITY && y[i] != f64::NEG_INFINITY {
                        g[i] += gout[i] * (av[i] - y[i]).exp();
                    }
                }
            });
            add_to(before, *b, |g| {
                for i in 0..y.len() {
                    if bv[i] != f64::NEG_INFINITY && y[i] != f64::NEG_INFINITY {
                        g[i] += gout[i] * (bv[i] - y[i]).exp();
                    }
                }
            });
        }
        Rule::Get { a, idx } => {
            let d = gout[0];
            add_to(before, *a, |g| {
                g[*idx] += d;
            });
        }
        Rule::SumVars { parts } => {
            let d = gout[0];
            for &p in parts {
                add_to(before, p, |g| {
                    g[0] += d;
                });
            }
        }
    }
}

fn transpose_data(src: &[f64], r: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    out
}
