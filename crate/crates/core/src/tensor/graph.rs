use std::borrow::Cow;

use rand::Rng;

use super::kernels;
use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
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
    MatMulBt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Dropout(Var, Vec<f64>),
    Softmax(Var),
    LayerNorm {
        input: Var,
        gamma: Var,
        beta: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    MaskRows(Var, Vec<bool>),
    MeanRows(Var, Vec<bool>, f64),
    Reshape(Var),
    Sum(Var),
}

#[derive(Debug)]
struct Node<'a> {
    shape: Vec<usize>,
    value: Cow<'a, [f64]>,
    op: Op,
    requires_grad: bool,
    /// Accumulated dLoss/dLeaf, kept across backward calls (leaves only).
    grad: Option<Vec<f64>>,
}

/// Execution-ordered record of differentiable operations.
///
/// Nodes are appended in execution order, which is a topological order, so
/// backward simply walks the tape in reverse.
#[derive(Debug, Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().expect("shape is never empty");
    (shape.iter().product::<usize>() / cols, cols)
}

/// Number of times `small` tiles `big` when `small` is a trailing suffix.
fn suffix_repeats(big: &[usize], small: &[usize]) -> Option<usize> {
    if small.len() > big.len() || big[big.len() - small.len()..] != *small {
        return None;
    }
    Some(big[..big.len() - small.len()].iter().product())
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Cow<'a, [f64]>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_op(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, parents: &[Var]) -> Var {
        let rg = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.push(shape, Cow::Owned(value), op, rg)
    }

    /// Registers a tensor by reference. It is differentiated iff the tensor
    /// has `requires_grad` set.
    pub fn leaf(&mut self, t: &'a Tensor) -> Var {
        self.push(
            t.shape().to_vec(),
            Cow::Borrowed(t.data()),
            Op::Leaf,
            t.requires_grad(),
        )
    }

    /// Registers an owned tensor (differentiated iff `requires_grad`).
    pub fn input(&mut self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), Op::Leaf, rg)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        let shape = t.shape().to_vec();
        self.push(shape, Cow::Owned(t.into_data()), Op::Leaf, false)
    }

    /// Borrowed constant data viewed with the given shape.
    pub fn constant_slice(&mut self, shape: Vec<usize>, data: &'a [f64]) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() || shape.contains(&0) {
            return Err(Error::dim("constant_slice", &shape, &[data.len()]));
        }
        Ok(self.push(shape, Cow::Borrowed(data), Op::Leaf, false))
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Copies a node's value out as a standalone tensor.
    pub fn tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.to_vec()).expect("graph shapes are valid")
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        match &*self.nodes[v.0].value {
            [x] => Ok(*x),
            _ => Err(Error::Contract(format!(
                "expected a scalar, got shape {:?}",
                self.nodes[v.0].shape
            ))),
        }
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f64>> {
        self.nodes[v.0].grad.take()
    }

    // ---- operations -------------------------------------------------------

    /// `a[m×k] · b[k×n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm_nn(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push_op(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a[m×k] · b[n×k]ᵀ`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
            return Err(Error::dim("matmul_bt", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[0]);
        let mut out = vec![0.0; m * n];
        kernels::gemm_nt(self.value(a), self.value(b), &mut out, m, k, n);
        Ok(self.push_op(vec![m, n], out, Op::MatMulBt(a, b), &[a, b]))
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if suffix_repeats(sa, sb).is_none() {
            return Err(Error::dim(name, sa, sb));
        }
        let bv = self.value(b);
        let out: Vec<f64> = self
            .value(a)
            .chunks(bv.len())
            .flat_map(|chunk| chunk.iter().zip(bv).map(|(&x, &y)| f(x, y)))
            .collect();
        let shape = sa.to_vec();
        Ok(self.push_op(shape, out, op, &[a, b]))
    }

    /// Elementwise `a + b`; `b` may be a trailing suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).iter().map(|x| x * s).collect();
        let shape = self.shape(a).to_vec();
        self.push_op(shape, out, Op::Scale(a, s), &[a])
    }

    /// Exact GELU, `x·Φ(x)`.
    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| kernels::gelu(x)).collect();
        let shape = self.shape(a).to_vec();
        self.push_op(shape, out, Op::Gelu(a), &[a])
    }

    /// Inverted dropout. Identity (no node, no RNG draw) in eval mode or at `p = 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, train: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!("dropout probability {p} not in [0, 1)")));
        }
        if !train || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = self.value(a).iter().zip(&mask).map(|(x, m)| x * m).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push_op(shape, out, Op::Dropout(a, mask), &[a]))
    }

    /// Softmax over the last axis.
    ///
    /// `mask` is either one flag per element or one flag per column (shared
    /// by every row). Masked positions are excluded from the max and the
    /// normalizer and are written as exact zeros, so their input values never
    /// influence the output.
    pub fn softmax(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (rows, cols) = rows_cols(&shape);
        if let Some(m) = mask {
            if m.len() != cols && m.len() != rows * cols {
                return Err(Error::dim("softmax mask", &shape, &[m.len()]));
            }
        }
        let x = self.value(a);
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            let xr = &x[r * cols..(r + 1) * cols];
            let valid = |j: usize| match mask {
                None => true,
                Some(m) if m.len() == cols => m[j],
                Some(m) => m[r * cols + j],
            };
            let mut max = f64::NEG_INFINITY;
            let mut any = false;
            for (j, &v) in xr.iter().enumerate() {
                if valid(j) {
                    any = true;
                    max = max.max(v);
                }
            }
            if !any {
                return Err(Error::DegenerateMask { row: r });
            }
            let yr = &mut out[r * cols..(r + 1) * cols];
            let mut sum = 0.0;
            for (j, y) in yr.iter_mut().enumerate() {
                if valid(j) {
                    *y = (xr[j] - max).exp();
                    sum += *y;
                }
            }
            yr.iter_mut().for_each(|y| *y /= sum);
        }
        Ok(self.push_op(shape, out, Op::Softmax(a), &[a]))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, a: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let (rows, cols) = rows_cols(&shape);
        if self.shape(gamma) != [cols] || self.shape(beta) != [cols] {
            return Err(Error::dim("layer_norm", &shape, self.shape(gamma)));
        }
        let (x, g, b) = (self.value(a), self.value(gamma), self.value(beta));
        let mut out = vec![0.0; rows * cols];
        let mut normalized = vec![0.0; rows * cols];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let xr = &x[r * cols..(r + 1) * cols];
            let mean = xr.iter().sum::<f64>() / cols as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..cols {
                let xh = (xr[j] - mean) * is;
                normalized[r * cols + j] = xh;
                out[r * cols + j] = g[j] * xh + b[j];
            }
        }
        let op = Op::LayerNorm {
            input: a,
            gamma,
            beta,
            normalized,
            inv_std,
        };
        Ok(self.push_op(shape, out, op, &[a, gamma, beta]))
    }

    /// Concatenates along the last axis. 1-D parts stay 1-D; otherwise all
    /// parts must be 2-D with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let all_1d = parts.iter().all(|&p| self.shape(p).len() == 1);
        let rows = if all_1d { 1 } else { self.shape(first)[0] };
        for &p in parts {
            let s = self.shape(p);
            let ok = if all_1d { true } else { s.len() == 2 && s[0] == rows };
            if !ok {
                return Err(Error::dim("concat_cols", self.shape(first), s));
            }
        }
        let widths: Vec<usize> = parts.iter().map(|&p| rows_cols(self.shape(p)).1).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let shape = if all_1d { vec![total] } else { vec![rows, total] };
        Ok(self.push_op(shape, out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Stacks 2-D parts with equal column counts along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        let cols = self.shape(first)[self.shape(first).len() - 1];
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != cols {
                return Err(Error::dim("concat_rows", self.shape(first), s));
            }
            rows += s[0];
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        Ok(self.push_op(vec![rows, cols], out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || len == 0 || start + len > s[0] {
            return Err(Error::dim("slice_rows", s, &[start, len]));
        }
        let cols = s[1];
        let out = self.value(a)[start * cols..(start + len) * cols].to_vec();
        Ok(self.push_op(vec![len, cols], out, Op::SliceRows(a, start), &[a]))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 || len == 0 || start + len > s[1] {
            return Err(Error::dim("slice_cols", s, &[start, len]));
        }
        let (rows, cols) = (s[0], s[1]);
        let x = self.value(a);
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&x[r * cols + start..r * cols + start + len]);
        }
        Ok(self.push_op(vec![rows, len], out, Op::SliceCols(a, start), &[a]))
    }

    /// Zeroes the rows whose mask entry is false.
    pub fn mask_rows(&mut self, a: Var, mask: &[bool]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let (rows, cols) = rows_cols(&s);
        if mask.len() != rows {
            return Err(Error::dim("mask_rows", &s, &[mask.len()]));
        }
        let mut out = self.value(a).to_vec();
        for (r, &keep) in mask.iter().enumerate() {
            if !keep {
                out[r * cols..(r + 1) * cols].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        Ok(self.push_op(s, out, Op::MaskRows(a, mask.to_vec()), &[a]))
    }

    /// Mean over the valid rows of a 2-D tensor, giving `[1×cols]`.
    pub fn mean_rows(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(Error::dim("mean_rows", &s, &[]));
        }
        let (rows, cols) = (s[0], s[1]);
        let mask = match mask {
            Some(m) if m.len() != rows => return Err(Error::dim("mean_rows mask", &s, &[m.len()])),
            Some(m) => m.to_vec(),
            None => vec![true; rows],
        };
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::DegenerateMask { row: 0 });
        }
        let x = self.value(a);
        let mut out = vec![0.0; cols];
        for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
            add_into(&mut out, &x[r * cols..(r + 1) * cols]);
        }
        let inv = 1.0 / count as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        Ok(self.push_op(vec![1, cols], out, Op::MeanRows(a, mask, inv), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let s = self.shape(a);
        if shape.iter().product::<usize>() != s.iter().product::<usize>() || shape.contains(&0) {
            return Err(Error::dim("reshape", s, &shape));
        }
        let out = self.value(a).to_vec();
        Ok(self.push_op(shape, out, Op::Reshape(a), &[a]))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = self.value(a).iter().sum();
        self.push_op(vec![1], vec![total], Op::Sum(a), &[a])
    }

    // ---- backward ---------------------------------------------------------

    /// Propagates dLoss/d(node) from a scalar `loss` to every reachable leaf
    /// that requires a gradient. Leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let loss_node = &self.nodes[loss.0];
        if loss_node.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                loss_node.shape
            )));
        }
        if !loss_node.value[0].is_finite() {
            return Err(Error::Numeric(format!("loss is {}", loss_node.value[0])));
        }
        if !loss_node.requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.nodes[i].grad {
                    Some(acc) => add_into(acc, &g),
                    slot @ None => *slot = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        // Runs `$body` on the parent's gradient buffer, allocating it on first
        // use. Parents that do not require a gradient are skipped.
        macro_rules! with_grad {
            ($v:expr, |$buf:ident| $body:expr) => {{
                let v: Var = $v;
                if nodes[v.0].requires_grad {
                    let mut owned = grads[v.0]
                        .take()
                        .unwrap_or_else(|| vec![0.0; nodes[v.0].value.len()]);
                    {
                        let $buf: &mut [f64] = &mut owned;
                        $body;
                    }
                    grads[v.0] = Some(owned);
                }
            }};
        }

        let node = &nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                with_grad!(*a, |da| kernels::gemm_nt(g, &nodes[b.0].value, da, m, n, k));
                with_grad!(*b, |db| kernels::gemm_tn(&nodes[a.0].value, g, db, m, k, n));
            }
            Op::MatMulBt(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[0];
                with_grad!(*a, |da| kernels::gemm_nn(g, &nodes[b.0].value, da, m, n, k));
                with_grad!(*b, |db| kernels::gemm_tn(g, &nodes[a.0].value, db, m, n, k));
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                with_grad!(*a, |da| add_into(da, g));
                with_grad!(*b, |db| {
                    let w = db.len();
                    for chunk in g.chunks(w) {
                        db.iter_mut().zip(chunk).for_each(|(d, &x)| *d += sign * x);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let w = bv.len();
                with_grad!(*a, |da| {
                    for (idx, d) in da.iter_mut().enumerate() {
                        *d += g[idx] * bv[idx % w];
                    }
                });
                with_grad!(*b, |db| {
                    for (idx, &x) in g.iter().enumerate() {
                        db[idx % w] += x * av[idx];
                    }
                });
            }
            Op::Scale(a, s) => {
                with_grad!(*a, |da| da.iter_mut().zip(g).for_each(|(d, &x)| *d += s * x));
            }
            Op::Gelu(a) => {
                let x = &nodes[a.0].value;
                with_grad!(*a, |da| {
                    for ((d, &gx), &xv) in da.iter_mut().zip(g).zip(x.iter()) {
                        *d += gx * kernels::gelu_grad(xv);
                    }
                });
            }
            Op::Dropout(a, mask) => {
                with_grad!(*a, |da| {
                    for ((d, &gx), &m) in da.iter_mut().zip(g).zip(mask) {
                        *d += gx * m;
                    }
                });
            }
            Op::Softmax(a) => {
                let (rows, cols) = rows_cols(&node.shape);
                with_grad!(*a, |da| {
                    for r in 0..rows {
                        let y = &out[r * cols..(r + 1) * cols];
                        let gr = &g[r * cols..(r + 1) * cols];
                        let s: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            da[r * cols + j] += y[j] * (gr[j] - s);
                        }
                    }
                });
            }
            Op::LayerNorm {
                input,
                gamma,
                beta,
                normalized,
                inv_std,
            } => {
                let (rows, cols) = rows_cols(&node.shape);
                let gam = &nodes[gamma.0].value;
                with_grad!(*input, |dx| {
                    let mut dxh = vec![0.0; cols];
                    for r in 0..rows {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let xh = &normalized[r * cols..(r + 1) * cols];
                        for j in 0..cols {
                            dxh[j] = gr[j] * gam[j];
                        }
                        let mean_d = dxh.iter().sum::<f64>() / cols as f64;
                        let mean_dx = dxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                        for j in 0..cols {
                            dx[r * cols + j] += inv_std[r] * (dxh[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                });
                with_grad!(*gamma, |dg| {
                    for r in 0..rows {
                        for j in 0..cols {
                            dg[j] += g[r * cols + j] * normalized[r * cols + j];
                        }
                    }
                });
                with_grad!(*beta, |db| {
                    for chunk in g.chunks(cols) {
                        add_into(db, chunk);
                    }
                });
            }
            Op::ConcatCols(parts) => {
                let (rows, total) = rows_cols(&node.shape);
                let mut offset = 0;
                for &p in parts {
                    let w = rows_cols(&nodes[p.0].shape).1;
                    with_grad!(p, |dp| {
                        for r in 0..rows {
                            add_into(&mut dp[r * w..(r + 1) * w], &g[r * total + offset..r * total + offset + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.len();
                    with_grad!(p, |dp| add_into(dp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SliceRows(a, start) => {
                let cols = node.shape[1];
                with_grad!(*a, |da| add_into(&mut da[start * cols..start * cols + g.len()], g));
            }
            Op::SliceCols(a, start) => {
                let (rows, len) = (node.shape[0], node.shape[1]);
                let cols = nodes[a.0].shape[1];
                with_grad!(*a, |da| {
                    for r in 0..rows {
                        add_into(&mut da[r * cols + start..r * cols + start + len], &g[r * len..(r + 1) * len]);
                    }
                });
            }
            Op::MaskRows(a, mask) => {
                let cols = rows_cols(&node.shape).1;
                with_grad!(*a, |da| {
                    for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                        add_into(&mut da[r * cols..(r + 1) * cols], &g[r * cols..(r + 1) * cols]);
                    }
                });
            }
            Op::MeanRows(a, mask, inv) => {
                let cols = node.shape[1];
                with_grad!(*a, |da| {
                    for (r, _) in mask.iter().enumerate().filter(|(_, &m)| m) {
                        for j in 0..cols {
                            da[r * cols + j] += g[j] * inv;
                        }
                    }
                });
            }
            Op::Reshape(a) => {
                with_grad!(*a, |da| add_into(da, g));
            }
            Op::Sum(a) => {
                let s = g[0];
                with_grad!(*a, |da| da.iter_mut().for_each(|d| *d += s));
            }
        }
    }
}
