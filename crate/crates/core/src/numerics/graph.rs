use alloc::vec;
use alloc::vec::Vec;

use super::{mat_mul, mat_mul_at_acc, mat_mul_bt_acc, Tensor};
use crate::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRows(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Tanh(Var),
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Transpose(Var),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    ScatterAddRows {
        target: Var,
        rows: Var,
        indices: Vec<usize>,
    },
    GatherElements(Var, Vec<(usize, usize)>),
    Sum(Var),
    Mean(Var),
    Mse(Var, Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Record of the differentiable operations executed in one forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn dim_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Dimension {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn add_into(dst: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    dst.get_or_insert_with(|| vec![0.0; len])
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Its `requires_grad` flag decides whether gradients
    /// are tracked for it.
    pub fn leaf(&mut self, value: Tensor) -> Var {
        let requires_grad = value.requires_grad();
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Records a leaf that does not take gradients.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value.with_requires_grad(false), Op::Leaf, false)
    }

    /// Records a leaf that takes gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value.with_requires_grad(true), Op::Leaf, true)
    }

    fn push(&mut self, mut value: Tensor, op: Op, requires_grad: bool) -> Var {
        value.set_requires_grad(requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient accumulated by every [`Graph::backward`] call so far.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads[v.0].as_deref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, p) = ta.dims2()?;
        let (p2, q) = tb.dims2()?;
        if p != p2 {
            return Err(dim_err("matmul", ta, tb));
        }
        let out = mat_mul(ta.data(), tb.data(), m, p, q);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, q], out)?, Op::MatMul(a, b), rg))
    }

    fn zip_same(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Vec<f64>> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(dim_err(name, ta, tb));
        }
        Ok(ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "add", |x, y| x + y)?;
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), rg))
    }

    /// `x[n×d] + bias` with `bias` holding `d` values, added to every row.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (n, d) = tx.dims2()?;
        if tb.numel() != d {
            return Err(dim_err("add_row", tx, tb));
        }
        let mut out = tx.data().to_vec();
        for row in out.chunks_mut(d.max(1)).take(n) {
            row.iter_mut().zip(tb.data()).for_each(|(o, b)| *o += b);
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::new(vec![n, d], out)?, Op::AddRow(x, bias), rg))
    }

    /// Scales row `i` of `x[n×d]` by `scale[i]`; `scale` holds `n` values.
    pub fn mul_rows(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (tx, ts) = (self.value(x), self.value(scale));
        let (n, d) = tx.dims2()?;
        if ts.numel() != n {
            return Err(dim_err("mul_rows", tx, ts));
        }
        let mut out = tx.data().to_vec();
        for (i, row) in out.chunks_mut(d.max(1)).take(n).enumerate() {
            let s = ts.data()[i];
            row.iter_mut().for_each(|o| *o *= s);
        }
        let rg = self.rg(x) || self.rg(scale);
        Ok(self.push(Tensor::new(vec![n, d], out)?, Op::MulRows(x, scale), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let out: Vec<f64> = t.data().iter().map(|v| v * factor).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out).expect("same shape"), Op::Scale(x, factor), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out: Vec<f64> = t.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out).expect("same shape"), Op::Relu(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out: Vec<f64> = t.data().iter().map(|&v| libm::tanh(v)).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(x);
        self.push(Tensor::new(shape, out).expect("same shape"), Op::Tanh(x), rg)
    }

    /// Softmax over each row, stabilized by subtracting the row maximum.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (n, c) = t.dims2()?;
        let out = softmax_rows_raw(t.data(), n, c);
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, c], out)?, Op::SoftmaxRows(x), rg))
    }

    /// Per-row `(x − mean) / sqrt(var + eps) · gain + bias` with the biased
    /// variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let (n, d) = tx.dims2()?;
        if d < 2 {
            return Err(Error::DegenerateDimension { op: "layer_norm", dim: d });
        }
        if tg.numel() != d {
            return Err(dim_err("layer_norm gain", tx, tg));
        }
        if tb.numel() != d {
            return Err(dim_err("layer_norm bias", tx, tb));
        }
        let mut xhat = vec![0.0; n * d];
        let mut inv_std = vec![0.0; n];
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            let row = &tx.data()[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv = 1.0 / libm::sqrt(var + eps);
            inv_std[i] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[i * d + j] = h;
                out[i * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Tensor::new(vec![n, d], out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let (n, d) = t.dims2()?;
        let mut out = vec![0.0; n * d];
        for i in 0..n {
            for j in 0..d {
                out[j * n + i] = t.data()[i * d + j];
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![d, n], out)?, Op::Transpose(x), rg))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let (n, d) = t.dims2()?;
        if start + len > d {
            return Err(Error::Index {
                what: "column",
                index: start + len,
                bound: d,
            });
        }
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&t.data()[i * d + start..i * d + start + len]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![n, len], out)?, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or(Error::DegenerateInput("concat_cols of no tensors"))?;
        let (n, _) = self.value(*first).dims2()?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            let (r, c) = t.dims2()?;
            if r != n {
                return Err(dim_err("concat_cols", self.value(*first), t));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![n, total], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Copies the listed rows, in order. Indices may repeat.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let (n, d) = t.dims2()?;
        let mut out = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= n {
                return Err(Error::Index {
                    what: "row",
                    index: i,
                    bound: n,
                });
            }
            out.extend_from_slice(&t.data()[i * d..(i + 1) * d]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(vec![indices.len(), d], out)?,
            Op::GatherRows(x, indices.to_vec()),
            rg,
        ))
    }

    /// `target` with `rows[j]` added into row `indices[j]`; duplicate indices
    /// accumulate.
    pub fn scatter_add_rows(&mut self, target: Var, indices: &[usize], rows: Var) -> Result<Var> {
        let (tt, tr) = (self.value(target), self.value(rows));
        let (n, d) = tt.dims2()?;
        let (m, d2) = tr.dims2()?;
        if d != d2 || m != indices.len() {
            return Err(dim_err("scatter_add_rows", tt, tr));
        }
        let mut out = tt.data().to_vec();
        for (j, &i) in indices.iter().enumerate() {
            if i >= n {
                return Err(Error::Index {
                    what: "row",
                    index: i,
                    bound: n,
                });
            }
            let src = &tr.data()[j * d..(j + 1) * d];
            out[i * d..(i + 1) * d].iter_mut().zip(src).for_each(|(o, s)| *o += s);
        }
        let rg = self.rg(target) || self.rg(rows);
        Ok(self.push(
            Tensor::new(vec![n, d], out)?,
            Op::ScatterAddRows {
                target,
                rows,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Picks `x[r][c]` for each `(r, c)` into a vector.
    pub fn gather_elements(&mut self, x: Var, positions: &[(usize, usize)]) -> Result<Var> {
        let t = self.value(x);
        let (n, d) = t.dims2()?;
        let mut out = Vec::with_capacity(positions.len());
        for &(r, c) in positions {
            if r >= n {
                return Err(Error::Index { what: "row", index: r, bound: n });
            }
            if c >= d {
                return Err(Error::Index { what: "column", index: c, bound: d });
            }
            out.push(t.data()[r * d + c]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::vector(out), Op::GatherElements(x, positions.to_vec()), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(Error::DegenerateInput("mean of an empty tensor"));
        }
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(s), Op::Mean(x), rg))
    }

    /// Mean of squared elementwise differences.
    pub fn mse_loss(&mut self, pred: Var, target: Var) -> Result<Var> {
        let (tp, tt) = (self.value(pred), self.value(target));
        if tp.shape() != tt.shape() {
            return Err(dim_err("mse_loss", tp, tt));
        }
        if tp.numel() == 0 {
            return Err(Error::DegenerateInput("mse_loss of empty tensors"));
        }
        let s: f64 = tp.data().iter().zip(tt.data()).map(|(a, b)| (a - b) * (a - b)).sum();
        let v = s / tp.numel() as f64;
        let rg = self.rg(pred) || self.rg(target);
        Ok(self.push(Tensor::scalar(v), Op::Mse(pred, target), rg))
    }

    /// Mean softmax cross-entropy of `logits[n×C]` against class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (n, c) = t.dims2()?;
        if labels.len() != n || n == 0 {
            return Err(Error::Dimension {
                op: "cross_entropy",
                left: t.shape().to_vec(),
                right: vec![labels.len()],
            });
        }
        let probs = softmax_rows_raw(t.data(), n, c);
        let mut loss = 0.0;
        for (i, &l) in labels.iter().enumerate() {
            if l >= c {
                return Err(Error::Index { what: "class", index: l, bound: c });
            }
            loss -= libm::log(probs[i * c + l].max(f64::MIN_POSITIVE));
        }
        loss /= n as f64;
        let rg = self.rg(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Scaled dot-product attention `softmax(q·kᵀ/√d)·v` for one head.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Result<Var> {
        let (_, dk) = self.value(q).dims2()?;
        let kt = self.transpose(k)?;
        let scores = self.matmul(q, kt)?;
        let scores = self.scale(scores, 1.0 / libm::sqrt(dk as f64));
        let weights = self.softmax_rows(scores)?;
        self.matmul(weights, v)
    }

    /// Back-propagates from a scalar `loss`, adding into the stored gradients
    /// of every node that requires them.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(Error::Contract(alloc::format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let mut local: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        local[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = local[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.backward_node(i, &g, &mut local)?;
            let stored = add_into(&mut self.grads[i], g.len());
            stored.iter_mut().zip(&g).for_each(|(s, x)| *s += x);
        }
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[f64], local: &mut [Option<Vec<f64>>]) -> Result<()> {
        let node = &self.nodes[i];
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let numel = |v: Var| nodes[v.0].value.numel();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, p) = ta.dims2()?;
                let (_, q) = tb.dims2()?;
                if wants(*a) {
                    let ga = add_into(&mut local[a.0], m * p);
                    mat_mul_bt_acc(ga, g, tb.data(), m, q, p);
                }
                if wants(*b) {
                    let gb = add_into(&mut local[b.0], p * q);
                    mat_mul_at_acc(gb, ta.data(), g, m, p, q);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if wants(*a) {
                    let ga = add_into(&mut local[a.0], g.len());
                    ga.iter_mut().zip(g).for_each(|(o, x)| *o += x);
                }
                if wants(*b) {
                    let gb = add_into(&mut local[b.0], g.len());
                    gb.iter_mut().zip(g).for_each(|(o, x)| *o += sign * x);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if wants(*a) {
                    let ga = add_into(&mut local[a.0], g.len());
                    for k in 0..g.len() {
                        ga[k] += g[k] * tb[k];
                    }
                }
                if wants(*b) {
                    let gb = add_into(&mut local[b.0], g.len());
                    for k in 0..g.len() {
                        gb[k] += g[k] * ta[k];
                    }
                }
            }
            Op::AddRow(x, bias) => {
                let d = numel(*bias);
                if wants(*x) {
                    let gx = add_into(&mut local[x.0], g.len());
                    gx.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
                if wants(*bias) && d > 0 {
                    let gb = add_into(&mut local[bias.0], d);
                    for row in g.chunks(d) {
                        gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                }
            }
            Op::MulRows(x, s) => {
                let tx = &nodes[x.0].value;
                let ts = nodes[s.0].value.data();
                let (n, d) = tx.dims2()?;
                if wants(*x) {
                    let gx = add_into(&mut local[x.0], n * d);
                    for r in 0..n {
                        for c in 0..d {
                            gx[r * d + c] += g[r * d + c] * ts[r];
                        }
                    }
                }
                if wants(*s) {
                    let gs = add_into(&mut local[s.0], n);
                    for r in 0..n {
                        let mut acc = 0.0;
                        for c in 0..d {
                            acc += g[r * d + c] * tx.data()[r * d + c];
                        }
                        gs[r] += acc;
                    }
                }
            }
            Op::Scale(x, f) => {
                if wants(*x) {
                    let gx = add_into(&mut local[x.0], g.len());
                    gx.iter_mut().zip(g).for_each(|(o, v)| *o += f * v);
                }
            }
            Op::Relu(x) => {
                if wants(*x) {
                    let tx = nodes[x.0].value.data();
                    let gx = add_into(&mut local[x.0], g.len());
                    for k in 0..g.len() {
                        if tx[k] > 0.0 {
                            gx[k] += g[k];
                        }
                    }
                }
            }
            Op::Tanh(x) => {
                if wants(*x) {
                    let y = node.value.data();
                    let gx = add_into(&mut local[x.0], g.len());
                    for k in 0..g.len() {
                        gx[k] += g[k] * (1.0 - y[k] * y[k]);
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                if wants(*x) {
                    let (n, c) = node.value.dims2()?;
                    let y = node.value.data();
                    let gx = add_into(&mut local[x.0], n * c);
                    for r in 0..n {
                        let yr = &y[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for k in 0..c {
                            gx[r * c + k] += yr[k] * (gr[k] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (n, d) = node.value.dims2()?;
                let gv = nodes[gain.0].value.data();
                if wants(*x) {
                    let gx = add_into(&mut local[x.0], n * d);
                    let mut dxhat = vec![0.0; d];
                    for r in 0..n {
                        let xr = &xhat[r * d..(r + 1) * d];
                        for k in 0..d {
                            dxhat[k] = g[r * d + k] * gv[k];
                        }
                        let s1: f64 = dxhat.iter().sum();
                        let s2: f64 = dxhat.iter().zip(xr).map(|(a, b)| a * b).sum();
                        let scale = inv_std[r] / d as f64;
                        for k in 0..d {
                            gx[r * d + k] += scale * (d as f64 * dxhat[k] - s1 - xr[k] * s2);
                        }
                    }
                }
                if wants(*gain) {
                    let gg = add_into(&mut local[gain.0], d);
                    for r in 0..n {
                        for k in 0..d {
                            gg[k] += g[r * d + k] * xhat[r * d + k];
                        }
                    }
                }
                if wants(*bias) {
                    let gb = add_into(&mut local[bias.0], d);
                    for r in 0..n {
                        for k in 0..d {
                            gb[k] += g[r * d + k];
                        }
                    }
                }
            }
            Op::Transpose(x) => {
                if wants(*x) {
                    // node value is [d×n]; the input is [n×d]
                    let (d, n) = node.value.dims2()?;
                    let gx = add_into(&mut local[x.0], n * d);
                    for r in 0..d {
                        for c in 0..n {
                            gx[c * d + r] += g[r * n + c];
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if wants(*x) {
                    let (n, len) = node.value.dims2()?;
                    let (_, d) = nodes[x.0].value.dims2()?;
                    let gx = add_into(&mut local[x.0], n * d);
                    for r in 0..n {
                        for c in 0..len {
                            gx[r * d + start + c] += g[r * len + c];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let (n, total) = node.value.dims2()?;
                let mut offset = 0;
                for p in parts {
                    let (_, w) = nodes[p.0].value.dims2()?;
                    if wants(*p) {
                        let gp = add_into(&mut local[p.0], n * w);
                        for r in 0..n {
                            for c in 0..w {
                                gp[r * w + c] += g[r * total + offset + c];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::GatherRows(x, indices) => {
                if wants(*x) {
                    let (n, d) = nodes[x.0].value.dims2()?;
                    let gx = add_into(&mut local[x.0], n * d);
                    for (j, &r) in indices.iter().enumerate() {
                        for c in 0..d {
                            gx[r * d + c] += g[j * d + c];
                        }
                    }
                }
            }
            Op::ScatterAddRows {
                target,
                rows,
                indices,
            } => {
                let (_, d) = node.value.dims2()?;
                if wants(*target) {
                    let gt = add_into(&mut local[target.0], g.len());
                    gt.iter_mut().zip(g).for_each(|(o, v)| *o += v);
                }
                if wants(*rows) {
                    let gr = add_into(&mut local[rows.0], indices.len() * d);
                    for (j, &r) in indices.iter().enumerate() {
                        for c in 0..d {
                            gr[j * d + c] += g[r * d + c];
                        }
                    }
                }
            }
            Op::GatherElements(x, positions) => {
                if wants(*x) {
                    let (n, d) = nodes[x.0].value.dims2()?;
                    let gx = add_into(&mut local[x.0], n * d);
                    for (j, &(r, c)) in positions.iter().enumerate() {
                        gx[r * d + c] += g[j];
                    }
                }
            }
            Op::Sum(x) => {
                if wants(*x) {
                    let len = numel(*x);
                    let gx = add_into(&mut local[x.0], len);
                    gx.iter_mut().for_each(|o| *o += g[0]);
                }
            }
            Op::Mean(x) => {
                if wants(*x) {
                    let len = numel(*x);
                    let gx = add_into(&mut local[x.0], len);
                    let v = g[0] / len as f64;
                    gx.iter_mut().for_each(|o| *o += v);
                }
            }
            Op::Mse(p, t) => {
                let (tp, tt) = (nodes[p.0].value.data(), nodes[t.0].value.data());
                let len = tp.len();
                let f = 2.0 * g[0] / len as f64;
                if wants(*p) {
                    let gp = add_into(&mut local[p.0], len);
                    for k in 0..len {
                        gp[k] += f * (tp[k] - tt[k]);
                    }
                }
                if wants(*t) {
                    let gt = add_into(&mut local[t.0], len);
                    for k in 0..len {
                        gt[k] -= f * (tp[k] - tt[k]);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if wants(*logits) {
                    let (n, c) = nodes[logits.0].value.dims2()?;
                    let gl = add_into(&mut local[logits.0], n * c);
                    let f = g[0] / n as f64;
                    for (r, &l) in labels.iter().enumerate() {
                        for k in 0..c {
                            let onehot = if k == l { 1.0 } else { 0.0 };
                            gl[r * c + k] += f * (probs[r * c + k] - onehot);
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

pub(crate) fn softmax_rows_raw(x: &[f64], n: usize, c: usize) -> Vec<f64> {
    let mut out = vec![0.0; n * c];
    for r in 0..n {
        let row = &x[r * c..(r + 1) * c];
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for k in 0..c {
            let e = libm::exp(row[k] - max);
            out[r * c + k] = e;
            z += e;
        }
        out[r * c..(r + 1) * c].iter_mut().for_each(|v| *v /= z);
    }
    out
}
