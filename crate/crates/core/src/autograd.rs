//! Reverse-mode differentiation over a recorded operation sequence.
//!
//! A [`Graph`] records every forward operation as a node holding its output
//! value and whatever the backward rule needs. [`Graph::backward`] walks the
//! nodes in reverse and applies each rule explicitly. Parameters are borrowed
//! from the caller's store, never copied into the graph.

use crate::error::{Error, Result};
use crate::params::Parameter;
use crate::tensor::{self, gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op {
    Leaf,
    Param,
    MatMul { a: Var, b: Var, b_trans: bool },
    Add(Var, Var),
    AddBias { x: Var, bias: Var },
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Softmax(Var),
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Gather { table: Var, ids: Vec<usize> },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        include: Vec<bool>,
        probs: Vec<f64>,
    },
    MeanRows { x: Var, start: usize, end: usize },
    NormalizeSum(Var),
    Dice {
        p: Var,
        mask: Vec<f64>,
        overlap: f64,
        denom: f64,
    },
    Sum(Var),
}

enum Slot {
    Owned(Tensor),
    Param(usize),
}

struct Node {
    slot: Slot,
    op: Op,
    requires_grad: bool,
}

pub struct Graph<'p> {
    params: &'p [Parameter],
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
    grad_all_params: bool,
}

impl Default for Graph<'static> {
    fn default() -> Self {
        Graph::new(&[])
    }
}

impl<'p> Graph<'p> {
    pub fn new(params: &'p [Parameter]) -> Self {
        Graph {
            params,
            nodes: Vec::new(),
            param_vars: vec![None; params.len()],
            grad_all_params: false,
        }
    }

    /// Treat every parameter as differentiable regardless of its trainable
    /// flag. Used by gradient checks.
    pub fn with_all_param_grads(mut self) -> Self {
        self.grad_all_params = true;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].slot {
            Slot::Owned(t) => t,
            Slot::Param(i) => &self.params[*i].value,
        }
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            slot: Slot::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.nodes[v.0].requires_grad)
    }

    pub fn input(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// The graph variable for parameter `index` of the borrowed store.
    pub fn param(&mut self, index: usize) -> Var {
        if let Some(v) = self.param_vars[index] {
            return v;
        }
        let requires_grad = self.grad_all_params || self.params[index].trainable;
        self.nodes.push(Node {
            slot: Slot::Param(index),
            op: Op::Param,
            requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[index] = Some(v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul { a, b, b_trans: false }, rg))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = tensor::matmul_nt(self.value(a), self.value(b))?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::MatMul { a, b, b_trans: true }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(format!(
                "add: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    /// Adds a length-`n` bias to every row of an `[m×n]` matrix.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let (_, cols) = tx.matrix_dims();
        if tb.numel() != cols {
            return Err(Error::shape(format!(
                "add_bias: {:?} vs bias {:?}",
                tx.shape(),
                tb.shape()
            )));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(cols) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += b;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(out, Op::AddBias { x, bias }, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(format!(
                "mul: {:?} vs {:?}",
                ta.shape(),
                tb.shape()
            )));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| v * factor).collect();
        let out = Tensor::new(tx.shape().to_vec(), data).expect("shape preserved");
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Scale(x, factor), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out = tensor::gelu(self.value(x));
        let rg = self.any_grad(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let (_, cols) = tx.matrix_dims();
        if tg.numel() != cols || tb.numel() != cols {
            return Err(Error::shape(format!(
                "layer_norm: {:?} vs gain {:?} / bias {:?}",
                tx.shape(),
                tg.shape(),
                tb.shape()
            )));
        }
        let (data, stats) = tensor::layer_norm_with_stats(tx.data(), cols, tg.data(), tb.data());
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean: stats.mean,
                rstd: stats.rstd,
            },
            rg,
        ))
    }

    /// Row-wise softmax of a matrix. With `causal`, row `t` only spans
    /// columns `0..=t` and later columns are exactly zero.
    pub fn softmax_rows(&mut self, x: Var, causal: bool) -> Result<Var> {
        let tx = self.value(x);
        if tx.rank() != 2 {
            return Err(Error::shape(format!(
                "softmax_rows expects a matrix, got {:?}",
                tx.shape()
            )));
        }
        let (rows, cols) = tx.matrix_dims();
        if causal && rows > cols {
            return Err(Error::shape(format!(
                "causal softmax needs rows <= cols, got {:?}",
                tx.shape()
            )));
        }
        let mut data = tx.data().to_vec();
        for (r, row) in data.chunks_mut(cols).enumerate() {
            if causal {
                let (visible, hidden) = row.split_at_mut(r + 1);
                tensor::softmax_in_place(visible);
                hidden.fill(0.0);
            } else {
                tensor::softmax_in_place(row);
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = tx.matrix_dims();
        if tx.rank() != 2 || start + len > cols || len == 0 {
            return Err(Error::shape(format!(
                "slice_cols {start}..{} of {:?}",
                start + len,
                tx.shape()
            )));
        }
        let mut data = Vec::with_capacity(rows * len);
        for row in tx.data().chunks(cols) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let out = Tensor::new(vec![rows, len], data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).matrix_dims().0;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.value(p).matrix_dims();
            if r != rows {
                return Err(Error::shape("concat_cols: row counts differ"));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (rows, cols) = tt.matrix_dims();
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::shape(format!(
                    "gather: index {id} out of range for {rows} rows"
                )));
            }
            data.extend_from_slice(tt.row(id));
        }
        let out = Tensor::new(vec![ids.len(), cols], data)?;
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Mean cross-entropy over the rows where `include` is set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], include: &[bool]) -> Result<Var> {
        let (loss, probs) = tensor::cross_entropy_with_probs(self.value(logits), targets, include)?;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                include: include.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Mean of rows `start..end`, as a `[1×cols]` matrix.
    pub fn mean_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        let (rows, cols) = tx.matrix_dims();
        if start >= end || end > rows {
            return Err(Error::EmptySpan);
        }
        let mut data = vec![0.0; cols];
        for r in start..end {
            for (d, v) in data.iter_mut().zip(tx.row(r)) {
                *d += v;
            }
        }
        let n = (end - start) as f64;
        data.iter_mut().for_each(|d| *d /= n);
        let out = Tensor::new(vec![1, cols], data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::MeanRows { x, start, end }, rg))
    }

    /// `x / Σx`.
    pub fn normalize_sum(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let total = tx.sum();
        if !(total > 0.0) {
            return Err(Error::shape(format!("normalize_sum: total {total} is not positive")));
        }
        let data = tx.data().iter().map(|v| v / total).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(out, Op::NormalizeSum(x), rg))
    }

    /// Soft-dice overlap loss `-ln((2⟨m,p⟩ + eps) / (Σm + Σp + eps))`.
    pub fn dice_loss(&mut self, p: Var, mask: &[f64], eps: f64) -> Result<Var> {
        let tp = self.value(p);
        if tp.numel() != mask.len() {
            return Err(Error::shape(format!(
                "dice: attention has {} cells, mask has {}",
                tp.numel(),
                mask.len()
            )));
        }
        let overlap: f64 = tp.data().iter().zip(mask).map(|(p, m)| p * m).sum();
        let denom = mask.iter().sum::<f64>() + tp.sum() + eps;
        let loss = -((2.0 * overlap + eps) / denom).ln();
        let rg = self.any_grad(&[p]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Dice {
                p,
                mask: mask.to_vec(),
                overlap: overlap + eps / 2.0,
                denom,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).sum();
        let rg = self.any_grad(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(dy) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(idx, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.value(v).numel();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn backward_node(&self, idx: usize, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let out = self.value(Var(idx));
        match &self.nodes[idx].op {
            Op::Leaf | Op::Param => {}
            Op::MatMul { a, b, b_trans } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = out.shape()[1];
                if let Some(ga) = self.acc(grads, *a) {
                    // dA = dY · op(B)ᵀ
                    gemm(m, n, k, dy, false, tb.data(), !*b_trans, 1.0, ga);
                }
                if let Some(gb) = self.acc(grads, *b) {
                    if *b_trans {
                        // B is [n×k]: dB = dYᵀ · A
                        gemm(n, m, k, dy, true, ta.data(), false, 1.0, gb);
                    } else {
                        gemm(k, m, n, ta.data(), true, dy, false, 1.0, gb);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(g) = self.acc(grads, v) {
                        add_into(g, dy);
                    }
                }
            }
            Op::AddBias { x, bias } => {
                if let Some(g) = self.acc(grads, *x) {
                    add_into(g, dy);
                }
                if let Some(g) = self.acc(grads, *bias) {
                    let cols = g.len();
                    for row in dy.chunks(cols) {
                        add_into(g, row);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(g) = self.acc(grads, *a) {
                    for ((g, d), v) in g.iter_mut().zip(dy).zip(tb) {
                        *g += d * v;
                    }
                }
                if let Some(g) = self.acc(grads, *b) {
                    for ((g, d), v) in g.iter_mut().zip(dy).zip(ta) {
                        *g += d * v;
                    }
                }
            }
            Op::Scale(x, factor) => {
                if let Some(g) = self.acc(grads, *x) {
                    for (g, d) in g.iter_mut().zip(dy) {
                        *g += d * factor;
                    }
                }
            }
            Op::Gelu(x) => {
                let tx = self.value(*x).data();
                if let Some(g) = self.acc(grads, *x) {
                    for ((g, d), v) in g.iter_mut().zip(dy).zip(tx) {
                        *g += d * tensor::gelu_grad_scalar(*v);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                mean,
                rstd,
            } => {
                let tx = self.value(*x).data();
                let tg = self.value(*gain).data();
                let cols = tg.len();
                let xhat = |r: usize, c: usize| (tx[r * cols + c] - mean[r]) * rstd[r];
                if let Some(g) = self.acc(grads, *gain) {
                    for (r, row) in dy.chunks(cols).enumerate() {
                        for c in 0..cols {
                            g[c] += row[c] * xhat(r, c);
                        }
                    }
                }
                if let Some(g) = self.acc(grads, *bias) {
                    for row in dy.chunks(cols) {
                        add_into(g, row);
                    }
                }
                if let Some(g) = self.acc(grads, *x) {
                    let n = cols as f64;
                    for (r, row) in dy.chunks(cols).enumerate() {
                        let mut mean_d = 0.0;
                        let mut mean_dx = 0.0;
                        for c in 0..cols {
                            let d = row[c] * tg[c];
                            mean_d += d;
                            mean_dx += d * xhat(r, c);
                        }
                        mean_d /= n;
                        mean_dx /= n;
                        for c in 0..cols {
                            let d = row[c] * tg[c];
                            g[r * cols + c] += rstd[r] * (d - mean_d - xhat(r, c) * mean_dx);
                        }
                    }
                }
            }
            Op::Softmax(x) => {
                if let Some(g) = self.acc(grads, *x) {
                    let cols = out.matrix_dims().1;
                    for ((grow, drow), yrow) in g
                        .chunks_mut(cols)
                        .zip(dy.chunks(cols))
                        .zip(out.data().chunks(cols))
                    {
                        let dot: f64 = drow.iter().zip(yrow).map(|(d, y)| d * y).sum();
                        for c in 0..cols {
                            grow[c] += yrow[c] * (drow[c] - dot);
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let len = out.matrix_dims().1;
                if let Some(g) = self.acc(grads, *x) {
                    let cols = g.len() / (dy.len() / len);
                    for (grow, drow) in g.chunks_mut(cols).zip(dy.chunks(len)) {
                        add_into(&mut grow[*start..start + len], drow);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.matrix_dims().1;
                let mut offset = 0;
                for &p in parts {
                    let cols = self.value(p).matrix_dims().1;
                    if let Some(g) = self.acc(grads, p) {
                        for (grow, drow) in g.chunks_mut(cols).zip(dy.chunks(total)) {
                            add_into(grow, &drow[offset..offset + cols]);
                        }
                    }
                    offset += cols;
                }
            }
            Op::Gather { table, ids } => {
                if let Some(g) = self.acc(grads, *table) {
                    let cols = out.matrix_dims().1;
                    for (&id, drow) in ids.iter().zip(dy.chunks(cols)) {
                        add_into(&mut g[id * cols..(id + 1) * cols], drow);
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                include,
                probs,
            } => {
                if let Some(g) = self.acc(grads, *logits) {
                    let vocab = probs.len() / targets.len();
                    let count = include.iter().filter(|&&m| m).count() as f64;
                    let scale = dy[0] / count;
                    for (r, (&t, &inc)) in targets.iter().zip(include).enumerate() {
                        if !inc {
                            continue;
                        }
                        let row = &probs[r * vocab..(r + 1) * vocab];
                        for c in 0..vocab {
                            let onehot = if c == t { 1.0 } else { 0.0 };
                            g[r * vocab + c] += scale * (row[c] - onehot);
                        }
                    }
                }
            }
            Op::MeanRows { x, start, end } => {
                if let Some(g) = self.acc(grads, *x) {
                    let cols = dy.len();
                    let n = (end - start) as f64;
                    for r in *start..*end {
                        for c in 0..cols {
                            g[r * cols + c] += dy[c] / n;
                        }
                    }
                }
            }
            Op::NormalizeSum(x) => {
                if let Some(g) = self.acc(grads, *x) {
                    let total = self.value(*x).sum();
                    let dot: f64 = dy.iter().zip(out.data()).map(|(d, y)| d * y).sum();
                    for (g, d) in g.iter_mut().zip(dy) {
                        *g += (d - dot) / total;
                    }
                }
            }
            Op::Dice {
                p,
                mask,
                overlap,
                denom,
            } => {
                if let Some(g) = self.acc(grads, *p) {
                    // d/dp_i of -ln(2I + eps) + ln(D)
                    for (g, m) in g.iter_mut().zip(mask) {
                        *g += dy[0] * (-m / overlap + 1.0 / denom);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(g) = self.acc(grads, *x) {
                    g.iter_mut().for_each(|g| *g += dy[0]);
                }
            }
        }
    }

    /// Parameter indices referenced by this graph with their variables.
    pub fn param_vars(&self) -> impl Iterator<Item = (usize, Var)> + '_ {
        self.param_vars
            .iter()
            .enumerate()
            .filter_map(|(i, v)| v.map(|v| (i, v)))
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Result of a reverse pass: one optional gradient buffer per node.
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Moves parameter gradients out, keyed by parameter index.
    pub fn into_param_grads(mut self, graph: &Graph<'_>) -> Vec<(usize, Vec<f64>)> {
        graph
            .param_vars()
            .filter_map(|(i, v)| self.grads[v.0].take().map(|g| (i, g)))
            .collect()
    }
}
