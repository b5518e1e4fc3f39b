//! Reverse-mode differentiation over a linear record of executed operations.
//!
//! Every operation appends a node holding its output value; [`Tape::backward`]
//! walks the nodes in exact reverse order and accumulates vector-Jacobian
//! products into the inputs that require gradients.

use crate::error::{Error, Result};
use crate::numerics::tensor::{gemm, sigmoid, softmax_into, Tensor};

/// Handle to a node on a [`Tape`].
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
    MatMulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    Sigmoid(Var),
    Tanh(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    Gather(Var, Vec<usize>),
    Select(Vec<bool>, Var, Var),
    Softmax(Var),
    WeightedSum(Var, Vec<Var>),
    CrossEntropy(Var, Vec<usize>, Vec<f64>),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` required one and the
    /// loss depends on it. Only leaves keep their gradients.
    pub fn get(&self, v: Var) -> Option<Tensor> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[v.0], g.clone()).expect("gradient shape"))
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads[v.0].take()
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.dims2() != b.dims2() || a.len() != b.len() {
        return Err(Error::shape(op, a.shape(), b.shape()));
    }
    Ok(())
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// Leaf that does not receive a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf that receives a gradient on backward.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = crate::numerics::tensor::matmul(self.value(a), self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = crate::numerics::tensor::matmul_nt(self.value(a), self.value(b))?;
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::MatMulNT(a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), ng))
    }

    /// Adds row vector `b` (length n) to every row of `a` (m×n).
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2();
        if self.value(b).len() != n {
            return Err(Error::shape("add_row", self.value(a).shape(), self.value(b).shape()));
        }
        let mut value = self.value(a).clone();
        let bias = self.value(b).data();
        let out = value.data_mut();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += bias[j];
            }
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::AddRow(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.value(a), self.value(b))?;
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), ng))
    }

    /// Scales row `i` of `a` (m×n) by `col[i]` (m×1).
    pub fn mul_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2();
        if self.value(col).len() != m {
            return Err(Error::shape("mul_col", self.value(a).shape(), self.value(col).shape()));
        }
        let mut value = self.value(a).clone();
        let c = self.value(col).data();
        let out = value.data_mut();
        for i in 0..m {
            for v in &mut out[i * n..(i + 1) * n] {
                *v *= c[i];
            }
        }
        let ng = self.ng(&[a, col]);
        Ok(self.push(value, Op::MulCol(a, col), ng))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        let ng = self.ng(&[a]);
        self.push(value, Op::Scale(a, s), ng)
    }

    pub fn one_minus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| 1.0 - x);
        let ng = self.ng(&[a]);
        self.push(value, Op::OneMinus(a), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        let ng = self.ng(&[a]);
        self.push(value, Op::Sigmoid(a), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        let ng = self.ng(&[a]);
        self.push(value, Op::Tanh(a), ng)
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_cols"))?;
        let m = self.value(first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2();
            if r != m {
                return Err(Error::shape("concat_cols", self.value(first).shape(), self.value(p).shape()));
            }
            widths.push(c);
        }
        let n: usize = widths.iter().sum();
        let mut out = vec![0.0; m * n];
        let mut off = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let src = self.value(p).data();
            for i in 0..m {
                out[i * n + off..i * n + off + w].copy_from_slice(&src[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let ng = self.ng(parts);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::Empty("concat_rows"))?;
        let n = self.value(first).cols();
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            if v.cols() != n {
                return Err(Error::shape("concat_rows", self.value(first).shape(), v.shape()));
            }
            data.extend_from_slice(v.data());
        }
        let m = data.len() / n;
        let ng = self.ng(parts);
        Ok(self.push(Tensor::matrix(m, n, data)?, Op::ConcatRows(parts.to_vec()), ng))
    }

    /// Columns `start..end` of `a`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2();
        if start >= end || end > n {
            return Err(Error::shape("slice_cols", self.value(a).shape(), &[start, end]));
        }
        let w = end - start;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&src[i * n + start..i * n + end]);
        }
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::matrix(m, w, out)?, Op::SliceCols(a, start), ng))
    }

    /// Row lookup: output row `i` is `table[ids[i]]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, n) = self.value(table).dims2();
        if ids.is_empty() {
            return Err(Error::Empty("gather"));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= rows {
                return Err(Error::shape("gather", self.value(table).shape(), &[id]));
            }
            out.extend_from_slice(&src[id * n..(id + 1) * n]);
        }
        let ng = self.ng(&[table]);
        Ok(self.push(Tensor::matrix(ids.len(), n, out)?, Op::Gather(table, ids.to_vec()), ng))
    }

    /// Row-wise choice: row `i` comes from `a` where `take_a[i]`, else from `b`.
    pub fn select_rows(&mut self, take_a: &[bool], a: Var, b: Var) -> Result<Var> {
        same_shape("select_rows", self.value(a), self.value(b))?;
        let (m, n) = self.value(a).dims2();
        if take_a.len() != m {
            return Err(Error::shape("select_rows", self.value(a).shape(), &[take_a.len()]));
        }
        let mut value = self.value(b).clone();
        let src = self.value(a).data();
        let out = value.data_mut();
        for (i, &t) in take_a.iter().enumerate() {
            if t {
                out[i * n..(i + 1) * n].copy_from_slice(&src[i * n..(i + 1) * n]);
            }
        }
        let ng = self.ng(&[a, b]);
        Ok(self.push(value, Op::Select(take_a.to_vec(), a, b), ng))
    }

    /// Row-wise softmax. With a mask (same element count as `a`), masked
    /// positions get weight exactly 0; a fully masked row is an error.
    pub fn softmax_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let (m, n) = self.value(a).dims2();
        if let Some(mk) = mask {
            if mk.len() != m * n {
                return Err(Error::shape("softmax_rows", self.value(a).shape(), &[mk.len()]));
            }
        }
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row_mask = mask.map(|mk| &mk[i * n..(i + 1) * n]);
            softmax_into(&src[i * n..(i + 1) * n], row_mask, &mut out[i * n..(i + 1) * n])?;
        }
        let shape = self.value(a).shape().to_vec();
        let ng = self.ng(&[a]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Softmax(a), ng))
    }

    /// `out[i] = Σ_t weights[i, t] · states[t][i]` for `weights` m×T and
    /// each state m×n.
    pub fn weighted_sum(&mut self, weights: Var, states: &[Var]) -> Result<Var> {
        let (m, t) = self.value(weights).dims2();
        if t != states.len() || t == 0 {
            return Err(Error::shape("weighted_sum", self.value(weights).shape(), &[states.len()]));
        }
        let (m2, n) = self.value(states[0]).dims2();
        if m2 != m {
            return Err(Error::shape("weighted_sum", self.value(weights).shape(), self.value(states[0]).shape()));
        }
        let w = self.value(weights).data();
        let mut out = vec![0.0; m * n];
        for (k, &s) in states.iter().enumerate() {
            let sv = self.value(s);
            if sv.dims2() != (m, n) {
                return Err(Error::shape("weighted_sum", self.value(states[0]).shape(), sv.shape()));
            }
            let sd = sv.data();
            for i in 0..m {
                let wik = w[i * t + k];
                if wik == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += wik * sd[i * n + j];
                }
            }
        }
        let mut all = vec![weights];
        all.extend_from_slice(states);
        let ng = self.ng(&all);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::WeightedSum(weights, states.to_vec()), ng))
    }

    /// Weighted sum over rows of `−log softmax(logits[i])[targets[i]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let (m, v) = self.value(logits).dims2();
        if targets.len() != m || weights.len() != m {
            return Err(Error::shape("cross_entropy", self.value(logits).shape(), &[targets.len(), weights.len()]));
        }
        let src = self.value(logits).data();
        let mut total = 0.0;
        for i in 0..m {
            if weights[i] == 0.0 {
                continue;
            }
            if targets[i] >= v {
                return Err(Error::shape("cross_entropy", self.value(logits).shape(), &[targets[i]]));
            }
            let row = &src[i * v..(i + 1) * v];
            total += weights[i] * (log_sum_exp(row) - row[targets[i]]);
        }
        let ng = self.ng(&[logits]);
        Ok(self.push(
            Tensor::scalar(total),
            Op::CrossEntropy(logits, targets.to_vec(), weights.to_vec()),
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        let ng = self.ng(&[a]);
        self.push(value, Op::Sum(a), ng)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward (loss must be scalar)", self.value(loss).shape(), &[1]));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.vjp(node, &g, &mut grads);
        }

        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn vjp(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let nodes = &self.nodes;
        let mut slot = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let buf = grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]);
            f(buf);
        };

        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(*a).dims2();
                let n = val(*b).cols();
                slot(*a, &mut |da| gemm(m, n, k, g, false, val(*b).data(), true, da, 1.0));
                slot(*b, &mut |db| gemm(k, m, n, val(*a).data(), true, g, false, db, 1.0));
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = val(*a).dims2();
                let n = val(*b).rows();
                slot(*a, &mut |da| gemm(m, n, k, g, false, val(*b).data(), false, da, 1.0));
                slot(*b, &mut |db| gemm(n, m, k, g, true, val(*a).data(), false, db, 1.0));
            }
            Op::Add(a, b) => {
                slot(*a, &mut |da| axpy(da, g, 1.0));
                slot(*b, &mut |db| axpy(db, g, 1.0));
            }
            Op::Sub(a, b) => {
                slot(*a, &mut |da| axpy(da, g, 1.0));
                slot(*b, &mut |db| axpy(db, g, -1.0));
            }
            Op::AddRow(a, b) => {
                let n = val(*a).cols();
                slot(*a, &mut |da| axpy(da, g, 1.0));
                slot(*b, &mut |db| {
                    for row in g.chunks(n) {
                        axpy(db, row, 1.0);
                    }
                });
            }
            Op::Mul(a, b) => {
                slot(*a, &mut |da| {
                    for ((d, &gi), &bi) in da.iter_mut().zip(g).zip(val(*b).data()) {
                        *d += gi * bi;
                    }
                });
                slot(*b, &mut |db| {
                    for ((d, &gi), &ai) in db.iter_mut().zip(g).zip(val(*a).data()) {
                        *d += gi * ai;
                    }
                });
            }
            Op::MulCol(a, col) => {
                let n = val(*a).cols();
                let c = val(*col).data();
                slot(*a, &mut |da| {
                    for (i, (drow, grow)) in da.chunks_mut(n).zip(g.chunks(n)).enumerate() {
                        axpy(drow, grow, c[i]);
                    }
                });
                slot(*col, &mut |dc| {
                    for (i, (grow, arow)) in g.chunks(n).zip(val(*a).data().chunks(n)).enumerate() {
                        dc[i] += dot(grow, arow);
                    }
                });
            }
            Op::Scale(a, s) => slot(*a, &mut |da| axpy(da, g, *s)),
            Op::OneMinus(a) => slot(*a, &mut |da| axpy(da, g, -1.0)),
            Op::Sigmoid(a) => {
                let y = node.value.data();
                slot(*a, &mut |da| {
                    for ((d, &gi), &yi) in da.iter_mut().zip(g).zip(y) {
                        *d += gi * yi * (1.0 - yi);
                    }
                });
            }
            Op::Tanh(a) => {
                let y = node.value.data();
                slot(*a, &mut |da| {
                    for ((d, &gi), &yi) in da.iter_mut().zip(g).zip(y) {
                        *d += gi * (1.0 - yi * yi);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (m, n) = node.value.dims2();
                let mut off = 0;
                for &p in parts {
                    let w = val(p).cols();
                    slot(p, &mut |dp| {
                        for i in 0..m {
                            axpy(&mut dp[i * w..(i + 1) * w], &g[i * n + off..i * n + off + w], 1.0);
                        }
                    });
                    off += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).len();
                    slot(p, &mut |dp| axpy(dp, &g[off..off + len], 1.0));
                    off += len;
                }
            }
            Op::SliceCols(a, start) => {
                let (m, w) = node.value.dims2();
                let n = val(*a).cols();
                slot(*a, &mut |da| {
                    for i in 0..m {
                        axpy(&mut da[i * n + start..i * n + start + w], &g[i * w..(i + 1) * w], 1.0);
                    }
                });
            }
            Op::Gather(table, ids) => {
                let n = val(*table).cols();
                slot(*table, &mut |dt| {
                    for (i, &id) in ids.iter().enumerate() {
                        axpy(&mut dt[id * n..(id + 1) * n], &g[i * n..(i + 1) * n], 1.0);
                    }
                });
            }
            Op::Select(take_a, a, b) => {
                let n = node.value.cols();
                slot(*a, &mut |da| {
                    for (i, &t) in take_a.iter().enumerate() {
                        if t {
                            axpy(&mut da[i * n..(i + 1) * n], &g[i * n..(i + 1) * n], 1.0);
                        }
                    }
                });
                slot(*b, &mut |db| {
                    for (i, &t) in take_a.iter().enumerate() {
                        if !t {
                            axpy(&mut db[i * n..(i + 1) * n], &g[i * n..(i + 1) * n], 1.0);
                        }
                    }
                });
            }
            Op::Softmax(a) => {
                let n = node.value.cols();
                let y = node.value.data();
                slot(*a, &mut |da| {
                    for ((drow, grow), yrow) in da.chunks_mut(n).zip(g.chunks(n)).zip(y.chunks(n)) {
                        let s = dot(grow, yrow);
                        for ((d, &gi), &yi) in drow.iter_mut().zip(grow).zip(yrow) {
                            *d += yi * (gi - s);
                        }
                    }
                });
            }
            Op::WeightedSum(weights, states) => {
                let (m, t) = val(*weights).dims2();
                let n = node.value.cols();
                let w = val(*weights).data();
                slot(*weights, &mut |dw| {
                    for (k, &s) in states.iter().enumerate() {
                        let sd = val(s).data();
                        for i in 0..m {
                            dw[i * t + k] += dot(&g[i * n..(i + 1) * n], &sd[i * n..(i + 1) * n]);
                        }
                    }
                });
                for (k, &s) in states.iter().enumerate() {
                    slot(s, &mut |ds| {
                        for i in 0..m {
                            axpy(&mut ds[i * n..(i + 1) * n], &g[i * n..(i + 1) * n], w[i * t + k]);
                        }
                    });
                }
            }
            Op::CrossEntropy(logits, targets, weights) => {
                let v = val(*logits).cols();
                let src = val(*logits).data();
                slot(*logits, &mut |dl| {
                    let mut p = vec![0.0; v];
                    for (i, (&tgt, &wi)) in targets.iter().zip(weights).enumerate() {
                        if wi == 0.0 {
                            continue;
                        }
                        softmax_into(&src[i * v..(i + 1) * v], None, &mut p).expect("non-empty row");
                        p[tgt] -= 1.0;
                        axpy(&mut dl[i * v..(i + 1) * v], &p, g[0] * wi);
                    }
                });
            }
            Op::Sum(a) => slot(*a, &mut |da| {
                for d in da.iter_mut() {
                    *d += g[0];
                }
            }),
        }
    }
}

fn axpy(y: &mut [f64], x: &[f64], alpha: f64) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}
