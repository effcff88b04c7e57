//! Define-by-run reverse-mode gradient tape.
//!
//! Every forward pass builds a fresh [`Tape`]. Nodes are appended in
//! evaluation order, so reverse iteration is a valid topological order for
//! the backward sweep. Parameters enter the tape through [`Tape::param`]; a
//! frozen parameter becomes a constant leaf and never receives a gradient.

use std::collections::HashMap;

use statrs::function::erf::erf;

use super::{Matrix, Parameter};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    Transpose(usize),
    Gelu(usize),
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    BatchNorm {
        x: usize,
        gain: usize,
        bias: usize,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    Softmax(usize),
    Attention {
        q: usize,
        k: usize,
        v: usize,
        seq_len: usize,
        heads: usize,
        probs: Vec<Matrix>,
    },
    MeanPool {
        x: usize,
        seq_len: usize,
    },
    GatherRows {
        x: usize,
        rows: Vec<usize>,
    },
    Assemble {
        src: usize,
        fill: usize,
        plan: Vec<Option<usize>>,
    },
    CrossEntropy {
        logits: usize,
        labels: Vec<usize>,
        probs: Matrix,
    },
    MaskedMse {
        pred: usize,
        target: Matrix,
        rows: Vec<usize>,
    },
    Sum(usize),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    grads: Option<Vec<Option<Matrix>>>,
    buffer_bytes: usize,
    buffer_peak: usize,
}

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for i in 0..out.rows() {
        let row = out.row_mut(i);
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            total += *v;
        }
        for v in row.iter_mut() {
            *v /= total;
        }
    }
    out
}

/// Exact-erf GELU.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + erf(x / std::f64::consts::SQRT_2))
}

fn gelu_grad(x: f64) -> f64 {
    let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
    0.5 * (1.0 + erf(x / std::f64::consts::SQRT_2)) + x * pdf
}

/// Normalizes each row to zero mean and unit variance.
fn normalize_rows(x: &Matrix, eps: f64) -> (Matrix, Vec<f64>) {
    let n = x.cols() as f64;
    let mut xhat = Matrix::zeros(x.rows(), x.cols());
    let mut inv = Vec::with_capacity(x.rows());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let s = 1.0 / (var + eps).sqrt();
        for (o, v) in xhat.row_mut(i).iter_mut().zip(row) {
            *o = (v - mean) * s;
        }
        inv.push(s);
    }
    (xhat, inv)
}

/// Backward of row normalization given upstream `dxhat`.
fn normalize_rows_backward(dxhat: &Matrix, xhat: &Matrix, inv: &[f64]) -> Matrix {
    let n = xhat.cols() as f64;
    let mut dx = Matrix::zeros(xhat.rows(), xhat.cols());
    for i in 0..xhat.rows() {
        let d = dxhat.row(i);
        let h = xhat.row(i);
        let sum_d: f64 = d.iter().sum();
        let sum_dh: f64 = d.iter().zip(h).map(|(a, b)| a * b).sum();
        for ((o, &dv), &hv) in dx.row_mut(i).iter_mut().zip(d).zip(h) {
            *o = inv[i] / n * (n * dv - sum_d - hv * sum_dh);
        }
    }
    dx
}

fn block(m: &Matrix, r0: usize, rows: usize, c0: usize, cols: usize) -> Matrix {
    Matrix::from_fn(rows, cols, |i, j| m.get(r0 + i, c0 + j))
}

fn add_block(m: &mut Matrix, r0: usize, c0: usize, b: &Matrix) {
    for i in 0..b.rows() {
        for j in 0..b.cols() {
            let v = m.get(r0 + i, c0 + j) + b.get(i, j);
            m.set(r0 + i, c0 + j, v);
        }
    }
}

fn accumulate(grads: &mut [Option<Matrix>], idx: usize, g: Matrix) {
    match &mut grads[idx] {
        Some(existing) => {
            for (a, b) in existing.as_mut_slice().iter_mut().zip(g.as_slice()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// Clears all nodes and gradients so the tape can record a new pass.
    pub fn reset(&mut self) {
        *self = Self::default();
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last backward pass with respect to `v`, if `v` is a
    /// leaf that required a gradient.
    pub fn grad(&self, v: Var) -> Option<&Matrix> {
        self.grads.as_ref()?.get(v.0)?.as_ref()
    }

    pub fn param_var(&self, name: &str) -> Option<Var> {
        self.params.get(name).copied()
    }

    /// Largest total of transient dequantization buffers alive on this tape.
    pub fn buffer_peak_bytes(&self) -> usize {
        self.buffer_peak
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool, name: &str) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(format!("output of {name}")));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, a: usize) -> bool {
        self.nodes[a].requires_grad
    }

    fn val(&self, a: usize) -> &Matrix {
        &self.nodes[a].value
    }

    /// Leaf with an explicit gradient requirement (used for inputs in checks).
    pub fn leaf(&mut self, value: Matrix, requires_grad: bool) -> Result<Var> {
        self.push(value, Op::Leaf, requires_grad, "leaf")
    }

    pub fn constant(&mut self, value: Matrix) -> Result<Var> {
        self.leaf(value, false)
    }

    /// Constant leaf that represents a transient dequantized weight.
    pub fn dequantized_buffer(&mut self, value: Matrix) -> Result<Var> {
        self.buffer_bytes += value.len() * std::mem::size_of::<f64>();
        self.buffer_peak = self.buffer_peak.max(self.buffer_bytes);
        self.constant(value)
    }

    /// Records `param` as a leaf; repeated calls with the same name share one
    /// node. Frozen parameters become constants.
    pub fn param(&mut self, param: &Parameter) -> Result<Var> {
        if let Some(&v) = self.params.get(&param.name) {
            return Ok(v);
        }
        let v = self.leaf(param.value.clone(), param.trainable)?;
        self.params.insert(param.name.clone(), v);
        Ok(v)
    }

    /// Adds the recorded gradient into `param.grad`. Frozen parameters are
    /// never written.
    pub fn accumulate_into(&self, param: &mut Parameter) -> Result<()> {
        if !param.trainable {
            return Ok(());
        }
        if let Some(g) = self.param_var(&param.name).and_then(|v| self.grad(v)) {
            param.grad.add_assign(g)?;
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.val(a.0).matmul(self.val(b.0))?;
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(value, Op::MatMul(a.0, b.0), rg, "matmul")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.val(a.0).add(self.val(b.0))?;
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(value, Op::Add(a.0, b.0), rg, "add")
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.val(a.0), self.val(row.0));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(Error::Shape {
                op: "add_row",
                left: x.shape(),
                right: r.shape(),
            });
        }
        let mut value = x.clone();
        for i in 0..value.rows() {
            for (o, b) in value.row_mut(i).iter_mut().zip(r.as_slice()) {
                *o += b;
            }
        }
        let rg = self.rg(a.0) || self.rg(row.0);
        self.push(value, Op::AddRow(a.0, row.0), rg, "add_row")
    }

    /// Multiplies every row of `a` elementwise by a `1×n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.val(a.0), self.val(row.0));
        if r.rows() != 1 || r.cols() != x.cols() {
            return Err(Error::Shape {
                op: "mul_row",
                left: x.shape(),
                right: r.shape(),
            });
        }
        let mut value = x.clone();
        for i in 0..value.rows() {
            for (o, b) in value.row_mut(i).iter_mut().zip(r.as_slice()) {
                *o *= b;
            }
        }
        let rg = self.rg(a.0) || self.rg(row.0);
        self.push(value, Op::MulRow(a.0, row.0), rg, "mul_row")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.val(a.0), self.val(b.0));
        if x.shape() != y.shape() {
            return Err(Error::Shape {
                op: "mul",
                left: x.shape(),
                right: y.shape(),
            });
        }
        let value = Matrix::from_vec(
            x.rows(),
            x.cols(),
            x.as_slice().iter().zip(y.as_slice()).map(|(p, q)| p * q).collect(),
        )?;
        let rg = self.rg(a.0) || self.rg(b.0);
        self.push(value, Op::Mul(a.0, b.0), rg, "mul")
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let value = self.val(a.0).scale(s);
        let rg = self.rg(a.0);
        self.push(value, Op::Scale(a.0, s), rg, "scale")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.val(a.0).transpose();
        let rg = self.rg(a.0);
        self.push(value, Op::Transpose(a.0), rg, "transpose")
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.val(a.0).map(gelu);
        let rg = self.rg(a.0);
        self.push(value, Op::Gelu(a.0), rg, "gelu")
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let value = softmax_rows(self.val(a.0));
        let rg = self.rg(a.0);
        self.push(value, Op::Softmax(a.0), rg, "softmax_rows")
    }

    /// Per-row layer normalization with a learned `1×n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let xv = self.val(x.0);
        for p in [gain, bias] {
            let pv = self.val(p.0);
            if pv.shape() != (1, xv.cols()) {
                return Err(Error::Shape {
                    op: "layer_norm",
                    left: xv.shape(),
                    right: pv.shape(),
                });
            }
        }
        let (xhat, inv_std) = normalize_rows(xv, eps);
        let value = affine_rows(&xhat, self.val(gain.0), self.val(bias.0));
        let rg = self.rg(x.0) || self.rg(gain.0) || self.rg(bias.0);
        self.push(
            value,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                inv_std,
            },
            rg,
            "layer_norm",
        )
    }

    /// Per-column normalization over the batch (training-mode batch norm).
    /// Returns the output and the batch mean and biased variance per column.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    ) -> Result<(Var, Vec<f64>, Vec<f64>)> {
        let xv = self.val(x.0);
        for p in [gain, bias] {
            let pv = self.val(p.0);
            if pv.shape() != (1, xv.cols()) {
                return Err(Error::Shape {
                    op: "batch_norm",
                    left: xv.shape(),
                    right: pv.shape(),
                });
            }
        }
        let xt = xv.transpose();
        let n = xt.cols() as f64;
        let means: Vec<f64> = (0..xt.rows()).map(|j| xt.row(j).iter().sum::<f64>() / n).collect();
        let vars: Vec<f64> = (0..xt.rows())
            .map(|j| xt.row(j).iter().map(|v| (v - means[j]).powi(2)).sum::<f64>() / n)
            .collect();
        let (xhat_t, inv_std) = normalize_rows(&xt, eps);
        let xhat = xhat_t.transpose();
        let value = affine_rows(&xhat, self.val(gain.0), self.val(bias.0));
        let rg = self.rg(x.0) || self.rg(gain.0) || self.rg(bias.0);
        let out = self.push(
            value,
            Op::BatchNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                xhat,
                inv_std,
            },
            rg,
            "batch_norm",
        )?;
        Ok((out, means, vars))
    }

    /// Multi-head scaled dot-product attention over consecutive sequences of
    /// `seq_len` rows. `q`, `k`, `v` are `(B·seq_len)×d`; heads partition the
    /// columns.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, seq_len: usize, heads: usize) -> Result<Var> {
        let (qv, kv, vv) = (self.val(q.0), self.val(k.0), self.val(v.0));
        if qv.shape() != kv.shape() || qv.shape() != vv.shape() {
            return Err(Error::Shape {
                op: "attention",
                left: qv.shape(),
                right: kv.shape(),
            });
        }
        let (n, d) = qv.shape();
        if seq_len == 0 || n % seq_len != 0 || heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "attention needs rows ({n}) divisible by seq_len ({seq_len}) and width ({d}) divisible by heads ({heads})"
            )));
        }
        let dk = d / heads;
        let scale = 1.0 / (dk as f64).sqrt();
        let mut out = Matrix::zeros(n, d);
        let mut probs = Vec::with_capacity(n / seq_len * heads);
        for s in 0..n / seq_len {
            let r0 = s * seq_len;
            for h in 0..heads {
                let c0 = h * dk;
                let qb = block(qv, r0, seq_len, c0, dk);
                let kb = block(kv, r0, seq_len, c0, dk);
                let vb = block(vv, r0, seq_len, c0, dk);
                let scores = qb.matmul_nt(&kb)?.scale(scale);
                let p = softmax_rows(&scores);
                let o = p.matmul(&vb)?;
                add_block(&mut out, r0, c0, &o);
                probs.push(p);
            }
        }
        let rg = self.rg(q.0) || self.rg(k.0) || self.rg(v.0);
        self.push(
            out,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                seq_len,
                heads,
                probs,
            },
            rg,
            "attention",
        )
    }

    /// Attention probability matrices recorded by an attention node, one per
    /// (sequence, head) pair in sequence-major order.
    pub fn attention_probs(&self, v: Var) -> Option<&[Matrix]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Mean over each consecutive group of `seq_len` rows.
    pub fn mean_pool(&mut self, x: Var, seq_len: usize) -> Result<Var> {
        let xv = self.val(x.0);
        if seq_len == 0 || !xv.rows().is_multiple_of(seq_len) {
            return Err(Error::Config(format!(
                "mean_pool: {} rows not divisible by {seq_len}",
                xv.rows()
            )));
        }
        let b = xv.rows() / seq_len;
        let mut out = Matrix::zeros(b, xv.cols());
        for s in 0..b {
            for t in 0..seq_len {
                for (o, v) in out.row_mut(s).iter_mut().zip(xv.row(s * seq_len + t)) {
                    *o += v;
                }
            }
            for o in out.row_mut(s) {
                *o /= seq_len as f64;
            }
        }
        let rg = self.rg(x.0);
        self.push(out, Op::MeanPool { x: x.0, seq_len }, rg, "mean_pool")
    }

    pub fn gather_rows(&mut self, x: Var, rows: Vec<usize>) -> Result<Var> {
        let xv = self.val(x.0);
        let mut out = Matrix::zeros(rows.len(), xv.cols());
        for (i, &r) in rows.iter().enumerate() {
            if r >= xv.rows() {
                return Err(Error::IndexOutOfRange {
                    index: r,
                    len: xv.rows(),
                });
            }
            out.row_mut(i).copy_from_slice(xv.row(r));
        }
        let rg = self.rg(x.0);
        self.push(out, Op::GatherRows { x: x.0, rows }, rg, "gather_rows")
    }

    /// Builds rows from `src` (`Some(i)` copies row `i`) or the `1×d` `fill`
    /// row (`None`).
    pub fn assemble(&mut self, src: Var, fill: Var, plan: Vec<Option<usize>>) -> Result<Var> {
        let (sv, fv) = (self.val(src.0), self.val(fill.0));
        if fv.shape() != (1, sv.cols()) {
            return Err(Error::Shape {
                op: "assemble",
                left: sv.shape(),
                right: fv.shape(),
            });
        }
        let mut out = Matrix::zeros(plan.len(), sv.cols());
        for (i, slot) in plan.iter().enumerate() {
            match slot {
                Some(r) if *r < sv.rows() => out.row_mut(i).copy_from_slice(sv.row(*r)),
                Some(r) => {
                    return Err(Error::IndexOutOfRange {
                        index: *r,
                        len: sv.rows(),
                    })
                }
                None => out.row_mut(i).copy_from_slice(fv.as_slice()),
            }
        }
        let rg = self.rg(src.0) || self.rg(fill.0);
        self.push(
            out,
            Op::Assemble {
                src: src.0,
                fill: fill.0,
                plan,
            },
            rg,
            "assemble",
        )
    }

    /// Mean softmax cross-entropy over the rows of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let lv = self.val(logits.0);
        if labels.len() != lv.rows() {
            return Err(Error::Shape {
                op: "cross_entropy",
                left: lv.shape(),
                right: (labels.len(), 1),
            });
        }
        let mut loss = 0.0;
        for (i, &y) in labels.iter().enumerate() {
            if y >= lv.cols() {
                return Err(Error::IndexOutOfRange {
                    index: y,
                    len: lv.cols(),
                });
            }
            let row = lv.row(i);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[y];
        }
        loss /= labels.len() as f64;
        let probs = softmax_rows(lv);
        let rg = self.rg(logits.0);
        self.push(
            Matrix::filled(1, 1, loss),
            Op::CrossEntropy {
                logits: logits.0,
                labels: labels.to_vec(),
                probs,
            },
            rg,
            "cross_entropy",
        )
    }

    /// Sum of squared row errors over `rows`, divided by `rows.len()`.
    pub fn masked_mse(&mut self, pred: Var, target: Matrix, rows: Vec<usize>) -> Result<Var> {
        let pv = self.val(pred.0);
        if pv.shape() != target.shape() {
            return Err(Error::Shape {
                op: "masked_mse",
                left: pv.shape(),
                right: target.shape(),
            });
        }
        if rows.is_empty() {
            return Err(Error::Config("masked_mse over an empty mask".into()));
        }
        let mut total = 0.0;
        for &r in &rows {
            if r >= pv.rows() {
                return Err(Error::IndexOutOfRange {
                    index: r,
                    len: pv.rows(),
                });
            }
            total += pv
                .row(r)
                .iter()
                .zip(target.row(r))
                .map(|(a, b)| (a - b) * (a - b))
                .sum::<f64>();
        }
        let loss = total / rows.len() as f64;
        let rg = self.rg(pred.0);
        self.push(
            Matrix::filled(1, 1, loss),
            Op::MaskedMse {
                pred: pred.0,
                target,
                rows,
            },
            rg,
            "masked_mse",
        )
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Matrix::filled(1, 1, self.val(a.0).sum());
        let rg = self.rg(a.0);
        self.push(value, Op::Sum(a.0), rg, "sum")
    }

    /// Reverse sweep from a `1×1` loss. Gradients of leaves are retained and
    /// can be read with [`Tape::grad`] or copied into parameters with
    /// [`Tape::accumulate_into`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::DoubleBackward);
        }
        let lv = self.val(loss.0);
        if lv.shape() != (1, 1) {
            return Err(Error::NonScalarLoss {
                rows: lv.rows(),
                cols: lv.cols(),
            });
        }
        let mut grads: Vec<Option<Matrix>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Matrix::filled(1, 1, 1.0));

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads)?;
        }
        // Interior gradients were consumed; only leaf gradients remain.
        self.grads = Some(grads);
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &Matrix, grads: &mut [Option<Matrix>]) -> Result<()> {
        let nodes = &self.nodes;
        let rg = |j: usize| nodes[j].requires_grad;
        let val = |j: usize| &nodes[j].value;
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if rg(*a) {
                    accumulate(grads, *a, g.matmul_nt(val(*b))?);
                }
                if rg(*b) {
                    accumulate(grads, *b, val(*a).matmul_tn(g)?);
                }
            }
            Op::Add(a, b) => {
                if rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if rg(*b) {
                    accumulate(grads, *b, g.clone());
                }
            }
            Op::AddRow(a, r) => {
                if rg(*a) {
                    accumulate(grads, *a, g.clone());
                }
                if rg(*r) {
                    accumulate(grads, *r, g.column_sums());
                }
            }
            Op::MulRow(a, r) => {
                let (x, row) = (val(*a), val(*r));
                if rg(*a) {
                    let mut d = g.clone();
                    for k in 0..d.rows() {
                        for (o, s) in d.row_mut(k).iter_mut().zip(row.as_slice()) {
                            *o *= s;
                        }
                    }
                    accumulate(grads, *a, d);
                }
                if rg(*r) {
                    let mut d = Matrix::zeros(1, row.cols());
                    for k in 0..g.rows() {
                        for ((o, gv), xv) in d.as_mut_slice().iter_mut().zip(g.row(k)).zip(x.row(k)) {
                            *o += gv * xv;
                        }
                    }
                    accumulate(grads, *r, d);
                }
            }
            Op::Mul(a, b) => {
                let (x, y) = (val(*a), val(*b));
                if rg(*a) {
                    let d = Matrix::from_vec(
                        g.rows(),
                        g.cols(),
                        g.as_slice().iter().zip(y.as_slice()).map(|(p, q)| p * q).collect(),
                    )?;
                    accumulate(grads, *a, d);
                }
                if rg(*b) {
                    let d = Matrix::from_vec(
                        g.rows(),
                        g.cols(),
                        g.as_slice().iter().zip(x.as_slice()).map(|(p, q)| p * q).collect(),
                    )?;
                    accumulate(grads, *b, d);
                }
            }
            Op::Scale(a, s) => {
                if rg(*a) {
                    accumulate(grads, *a, g.scale(*s));
                }
            }
            Op::Transpose(a) => {
                if rg(*a) {
                    accumulate(grads, *a, g.transpose());
                }
            }
            Op::Gelu(a) => {
                if rg(*a) {
                    let x = val(*a);
                    let d = Matrix::from_vec(
                        g.rows(),
                        g.cols(),
                        g.as_slice()
                            .iter()
                            .zip(x.as_slice())
                            .map(|(gv, xv)| gv * gelu_grad(*xv))
                            .collect(),
                    )?;
                    accumulate(grads, *a, d);
                }
            }
            Op::Softmax(a) => {
                if rg(*a) {
                    let y = &nodes[i].value;
                    let mut d = Matrix::zeros(y.rows(), y.cols());
                    for k in 0..y.rows() {
                        let dot: f64 = g.row(k).iter().zip(y.row(k)).map(|(p, q)| p * q).sum();
                        for ((o, gv), yv) in d.row_mut(k).iter_mut().zip(g.row(k)).zip(y.row(k)) {
                            *o = yv * (gv - dot);
                        }
                    }
                    accumulate(grads, *a, d);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = val(*gain);
                if rg(*gain) {
                    let mut d = Matrix::zeros(1, gv.cols());
                    for k in 0..g.rows() {
                        for ((o, a), b) in d.as_mut_slice().iter_mut().zip(g.row(k)).zip(xhat.row(k)) {
                            *o += a * b;
                        }
                    }
                    accumulate(grads, *gain, d);
                }
                if rg(*bias) {
                    accumulate(grads, *bias, g.column_sums());
                }
                if rg(*x) {
                    let dxhat = scale_cols(g, gv);
                    accumulate(grads, *x, normalize_rows_backward(&dxhat, xhat, inv_std));
                }
            }
            Op::BatchNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = val(*gain);
                if rg(*gain) {
                    let mut d = Matrix::zeros(1, gv.cols());
                    for k in 0..g.rows() {
                        for ((o, a), b) in d.as_mut_slice().iter_mut().zip(g.row(k)).zip(xhat.row(k)) {
                            *o += a * b;
                        }
                    }
                    accumulate(grads, *gain, d);
                }
                if rg(*bias) {
                    accumulate(grads, *bias, g.column_sums());
                }
                if rg(*x) {
                    let dxhat = scale_cols(g, gv).transpose();
                    let dx = normalize_rows_backward(&dxhat, &xhat.transpose(), inv_std);
                    accumulate(grads, *x, dx.transpose());
                }
            }
            Op::Attention {
                q,
                k,
                v,
                seq_len,
                heads,
                probs,
            } => {
                let (qv, kv, vv) = (val(*q), val(*k), val(*v));
                let (n, d) = qv.shape();
                let dk = d / heads;
                let scale = 1.0 / (dk as f64).sqrt();
                let mut dq = Matrix::zeros(n, d);
                let mut dkm = Matrix::zeros(n, d);
                let mut dv = Matrix::zeros(n, d);
                for s in 0..n / seq_len {
                    let r0 = s * seq_len;
                    for h in 0..*heads {
                        let c0 = h * dk;
                        let p = &probs[s * heads + h];
                        let go = block(g, r0, *seq_len, c0, dk);
                        let qb = block(qv, r0, *seq_len, c0, dk);
                        let kb = block(kv, r0, *seq_len, c0, dk);
                        let vb = block(vv, r0, *seq_len, c0, dk);
                        let dp = go.matmul_nt(&vb)?;
                        add_block(&mut dv, r0, c0, &p.matmul_tn(&go)?);
                        let mut ds = Matrix::zeros(*seq_len, *seq_len);
                        for r in 0..*seq_len {
                            let dot: f64 = dp.row(r).iter().zip(p.row(r)).map(|(a, b)| a * b).sum();
                            for ((o, a), b) in ds.row_mut(r).iter_mut().zip(dp.row(r)).zip(p.row(r)) {
                                *o = b * (a - dot);
                            }
                        }
                        add_block(&mut dq, r0, c0, &ds.matmul(&kb)?.scale(scale));
                        add_block(&mut dkm, r0, c0, &ds.matmul_tn(&qb)?.scale(scale));
                    }
                }
                if rg(*q) {
                    accumulate(grads, *q, dq);
                }
                if rg(*k) {
                    accumulate(grads, *k, dkm);
                }
                if rg(*v) {
                    accumulate(grads, *v, dv);
                }
            }
            Op::MeanPool { x, seq_len } => {
                if rg(*x) {
                    let xv = val(*x);
                    let mut d = Matrix::zeros(xv.rows(), xv.cols());
                    for r in 0..xv.rows() {
                        let s = r / seq_len;
                        for (o, gv) in d.row_mut(r).iter_mut().zip(g.row(s)) {
                            *o = gv / *seq_len as f64;
                        }
                    }
                    accumulate(grads, *x, d);
                }
            }
            Op::GatherRows { x, rows } => {
                if rg(*x) {
                    let xv = val(*x);
                    let mut d = Matrix::zeros(xv.rows(), xv.cols());
                    for (k, &r) in rows.iter().enumerate() {
                        for (o, gv) in d.row_mut(r).iter_mut().zip(g.row(k)) {
                            *o += gv;
                        }
                    }
                    accumulate(grads, *x, d);
                }
            }
            Op::Assemble { src, fill, plan } => {
                let sv = val(*src);
                let mut dsrc = Matrix::zeros(sv.rows(), sv.cols());
                let mut dfill = Matrix::zeros(1, sv.cols());
                for (k, slot) in plan.iter().enumerate() {
                    let target = match slot {
                        Some(r) => dsrc.row_mut(*r),
                        None => dfill.row_mut(0),
                    };
                    for (o, gv) in target.iter_mut().zip(g.row(k)) {
                        *o += gv;
                    }
                }
                if rg(*src) {
                    accumulate(grads, *src, dsrc);
                }
                if rg(*fill) {
                    accumulate(grads, *fill, dfill);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if rg(*logits) {
                    let b = labels.len() as f64;
                    let mut d = probs.clone();
                    for (r, &y) in labels.iter().enumerate() {
                        let v = d.get(r, y) - 1.0;
                        d.set(r, y, v);
                    }
                    accumulate(grads, *logits, d.scale(g.get(0, 0) / b));
                }
            }
            Op::MaskedMse { pred, target, rows } => {
                if rg(*pred) {
                    let pv = val(*pred);
                    let c = 2.0 * g.get(0, 0) / rows.len() as f64;
                    let mut d = Matrix::zeros(pv.rows(), pv.cols());
                    for &r in rows {
                        for ((o, a), b) in d.row_mut(r).iter_mut().zip(pv.row(r)).zip(target.row(r)) {
                            *o += c * (a - b);
                        }
                    }
                    accumulate(grads, *pred, d);
                }
            }
            Op::Sum(a) => {
                if rg(*a) {
                    let av = val(*a);
                    accumulate(grads, *a, Matrix::filled(av.rows(), av.cols(), g.get(0, 0)));
                }
            }
        }
        Ok(())
    }
}

fn affine_rows(xhat: &Matrix, gain: &Matrix, bias: &Matrix) -> Matrix {
    let mut out = xhat.clone();
    for i in 0..out.rows() {
        for ((o, g), b) in out.row_mut(i).iter_mut().zip(gain.as_slice()).zip(bias.as_slice()) {
            *o = *o * g + b;
        }
    }
    out
}

fn scale_cols(m: &Matrix, row: &Matrix) -> Matrix {
    let mut out = m.clone();
    for i in 0..out.rows() {
        for (o, s) in out.row_mut(i).iter_mut().zip(row.as_slice()) {
            *o *= s;
        }
    }
    out
}
