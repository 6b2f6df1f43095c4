//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Nodes are appended in evaluation order, so the tape index order is a
//! topological order and the backward pass walks it in reverse. A node needs a
//! gradient only when one of its inputs does; constants and frozen parameters
//! are never visited by the backward pass.

use std::collections::BTreeMap;

use super::tensor::{
    check_temperature, dot, gelu, gelu_grad, layer_norm_row, matmul_into,
    matmul_nt_into, matmul_tn_into, sigmoid, transpose_data,
    validate_distribution_rows, Tensor,
};
use crate::error::{shape_err, Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    MatMulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Softmax { x: Var, t: f64 },
    LogSoftmax { x: Var, t: f64 },
    LayerNorm { x: Var, inv_std: Vec<f64> },
    L2Normalize { x: Var, norms: Vec<f64> },
    Sum(Var),
    Reshape(Var),
    Transpose(Var),
    SliceCols { x: Var, start: usize },
    SliceRows { x: Var, start: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    GatherRows { x: Var, ids: Vec<usize> },
    GroupMeanRows { x: Var, groups: Vec<Vec<usize>> },
    ReplaceRows { x: Var, row: Var, mask: Vec<bool> },
    BceWithLogits { logits: Var, targets: Vec<f64> },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn dims2(t: &Tensor) -> (usize, usize) {
    t.as_matrix()
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Records a tensor; it is differentiable iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let g = t.requires_grad();
        self.push(t, Op::Leaf, g)
    }

    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t.with_grad(true), Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t.with_grad(false), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return shape_err(format!("matmul {:?} x {:?}", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let mut out = vec![0.0; m * n];
        matmul_into(av.data(), bv.data(), &mut out, m, k, n);
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), g))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[1] {
            return shape_err(format!("matmul_nt {:?} x {:?}ᵀ", av.shape(), bv.shape()));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
        let mut out = vec![0.0; m * n];
        matmul_nt_into(av.data(), bv.data(), &mut out, m, k, n);
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNt(a, b), g))
    }

    fn binary(&mut self, a: Var, b: Var, f: fn(f64, f64) -> f64, op: Op) -> Result<Var> {
        let out = self.value(a).zip_map(self.value(b), f)?;
        let g = self.ng(a) || self.ng(b);
        Ok(self.push(out, op, g))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn row_broadcast(&mut self, a: Var, row: Var, mul: bool) -> Result<Var> {
        let (_, c) = dims2(self.value(a));
        if self.value(row).numel() != c {
            return shape_err(format!(
                "row broadcast of {:?} onto {:?}",
                self.shape(row),
                self.shape(a)
            ));
        }
        let mut out = self.value(a).clone();
        let r = self.value(row).data().to_vec();
        for chunk in out.data_mut().chunks_mut(c) {
            for (o, v) in chunk.iter_mut().zip(&r) {
                if mul {
                    *o *= v;
                } else {
                    *o += v;
                }
            }
        }
        let g = self.ng(a) || self.ng(row);
        let op = if mul { Op::MulRow(a, row) } else { Op::AddRow(a, row) };
        Ok(self.push(out.with_grad(false), op, g))
    }

    /// Adds a length-`c` vector to every row of an `r×c` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, false)
    }

    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var> {
        self.row_broadcast(a, row, true)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let out = self.value(a).map(|v| v * s);
        let g = self.ng(a);
        self.push(out, Op::Scale(a, s), g)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(gelu);
        let g = self.ng(a);
        self.push(out, Op::Gelu(a), g)
    }

    pub fn softmax(&mut self, x: Var, t: f64) -> Result<Var> {
        let out = self.value(x).softmax(t)?;
        let g = self.ng(x);
        Ok(self.push(out, Op::Softmax { x, t }, g))
    }

    pub fn log_softmax(&mut self, x: Var, t: f64) -> Result<Var> {
        let out = self.value(x).log_softmax(t)?;
        let g = self.ng(x);
        Ok(self.push(out, Op::LogSoftmax { x, t }, g))
    }

    /// Row-wise layer normalization without affine parameters.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Parameter(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let mut out = self.value(x).clone();
        let (r, c) = dims2(&out);
        let mut inv_std = Vec::with_capacity(r);
        for row in out.data_mut().chunks_mut(c) {
            inv_std.push(layer_norm_row(row, eps));
        }
        let g = self.ng(x);
        Ok(self.push(out.with_grad(false), Op::LayerNorm { x, inv_std }, g))
    }

    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        let mut out = self.value(x).clone();
        let (_, c) = dims2(&out);
        let mut norms = Vec::new();
        for row in out.data_mut().chunks_mut(c) {
            let n = dot(row, row).sqrt().max(eps);
            norms.push(n);
            for v in row.iter_mut() {
                *v /= n;
            }
        }
        let g = self.ng(x);
        self.push(out.with_grad(false), Op::L2Normalize { x, norms }, g)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let g = self.ng(x);
        self.push(Tensor::scalar(s), Op::Sum(x), g)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        let g = self.ng(x);
        Ok(self.push(out, Op::Reshape(x), g))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose()?;
        let g = self.ng(x);
        Ok(self.push(out, Op::Transpose(x), g))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let (r, c) = dims2(v);
        if start + len > c || len == 0 {
            return shape_err(format!("slice_cols {start}+{len} of {c} columns"));
        }
        let mut out = Vec::with_capacity(r * len);
        for row in v.data().chunks(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let g = self.ng(x);
        Ok(self.push(Tensor::new(vec![r, len], out)?, Op::SliceCols { x, start }, g))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        let (r, c) = dims2(v);
        if start + len > r || len == 0 {
            return shape_err(format!("slice_rows {start}+{len} of {r} rows"));
        }
        let out = v.data()[start * c..(start + len) * c].to_vec();
        let g = self.ng(x);
        Ok(self.push(Tensor::new(vec![len, c], out)?, Op::SliceRows { x, start }, g))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let c = match xs.first() {
            Some(&x) => dims2(self.value(x)).1,
            None => return shape_err("concat_rows of nothing"),
        };
        let mut out = Vec::new();
        let mut rows = 0;
        for &x in xs {
            let v = self.value(x);
            let (r, cc) = dims2(v);
            if cc != c {
                return shape_err(format!("concat_rows column mismatch {cc} vs {c}"));
            }
            rows += r;
            out.extend_from_slice(v.data());
        }
        let g = xs.iter().any(|&x| self.ng(x));
        Ok(self.push(Tensor::new(vec![rows, c], out)?, Op::ConcatRows(xs.to_vec()), g))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let r = match xs.first() {
            Some(&x) => dims2(self.value(x)).0,
            None => return shape_err("concat_cols of nothing"),
        };
        let widths: Vec<usize> = xs.iter().map(|&x| dims2(self.value(x)).1).collect();
        if xs.iter().any(|&x| dims2(self.value(x)).0 != r) {
            return shape_err("concat_cols row mismatch");
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; r * total];
        let mut off = 0;
        for (&x, &w) in xs.iter().zip(&widths) {
            let d = self.value(x).data();
            for i in 0..r {
                out[i * total + off..i * total + off + w].copy_from_slice(&d[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let g = xs.iter().any(|&x| self.ng(x));
        Ok(self.push(Tensor::new(vec![r, total], out)?, Op::ConcatCols(xs.to_vec()), g))
    }

    /// Embedding lookup: row `ids[i]` of `x` becomes output row `i`.
    pub fn gather_rows(&mut self, x: Var, ids: &[usize]) -> Result<Var> {
        let v = self.value(x);
        let (r, c) = dims2(v);
        if ids.is_empty() {
            return shape_err("gather_rows with no ids");
        }
        let mut out = Vec::with_capacity(ids.len() * c);
        for &id in ids {
            if id >= r {
                return shape_err(format!("gather id {id} out of range for {r} rows"));
            }
            out.extend_from_slice(&v.data()[id * c..(id + 1) * c]);
        }
        let g = self.ng(x);
        Ok(self.push(
            Tensor::new(vec![ids.len(), c], out)?,
            Op::GatherRows {
                x,
                ids: ids.to_vec(),
            },
            g,
        ))
    }

    /// Output row `g` is the mean of the rows listed in `groups[g]`.
    pub fn group_mean_rows(&mut self, x: Var, groups: Vec<Vec<usize>>) -> Result<Var> {
        let v = self.value(x);
        let (r, c) = dims2(v);
        let mut out = vec![0.0; groups.len() * c];
        for (gi, grp) in groups.iter().enumerate() {
            if grp.is_empty() || grp.iter().any(|&i| i >= r) {
                return shape_err(format!("invalid row group {grp:?} for {r} rows"));
            }
            let o = &mut out[gi * c..(gi + 1) * c];
            for &i in grp {
                for (ov, xv) in o.iter_mut().zip(&v.data()[i * c..(i + 1) * c]) {
                    *ov += xv;
                }
            }
            let inv = 1.0 / grp.len() as f64;
            o.iter_mut().for_each(|ov| *ov *= inv);
        }
        let g = self.ng(x);
        let n = groups.len();
        Ok(self.push(Tensor::new(vec![n, c], out)?, Op::GroupMeanRows { x, groups }, g))
    }

    /// Replaces every row `i` with `mask[i]` set by the vector `row`.
    pub fn replace_rows(&mut self, x: Var, row: Var, mask: &[bool]) -> Result<Var> {
        let v = self.value(x);
        let (r, c) = dims2(v);
        if mask.len() != r || self.value(row).numel() != c {
            return shape_err("replace_rows mask/row shape mismatch");
        }
        let rv = self.value(row).data().to_vec();
        let mut out = v.clone();
        for (i, chunk) in out.data_mut().chunks_mut(c).enumerate() {
            if mask[i] {
                chunk.copy_from_slice(&rv);
            }
        }
        let g = self.ng(x) || self.ng(row);
        Ok(self.push(
            out.with_grad(false),
            Op::ReplaceRows {
                x,
                row,
                mask: mask.to_vec(),
            },
            g,
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &Tensor) -> Result<Var> {
        let lv = self.value(logits);
        if lv.shape() != targets.shape() {
            return shape_err(format!("bce {:?} vs {:?}", lv.shape(), targets.shape()));
        }
        let n = lv.numel() as f64;
        let loss: f64 = lv
            .data()
            .iter()
            .zip(targets.data())
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        let g = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.data().to_vec(),
            },
            g,
        ))
    }

    /// Mean over rows of `H(target, softmax(logits / t))`; `target` is a constant.
    pub fn soft_cross_entropy(&mut self, target: &Tensor, logits: Var, t: f64) -> Result<Var> {
        validate_distribution_rows(target)?;
        check_temperature(t)?;
        if target.shape() != self.shape(logits) {
            return shape_err(format!(
                "soft_cross_entropy target {:?} vs logits {:?}",
                target.shape(),
                self.shape(logits)
            ));
        }
        let rows = dims2(target).0 as f64;
        let logp = self.log_softmax(logits, t)?;
        let tv = self.constant(target.clone());
        let prod = self.mul(tv, logp)?;
        let s = self.sum(prod);
        Ok(self.scale(s, -1.0 / rows))
    }

    /// Mean cross-entropy against integer class labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (r, c) = dims2(self.value(logits));
        if labels.len() != r {
            return shape_err(format!("{} labels for {r} rows", labels.len()));
        }
        let mut onehot = Tensor::zeros(&[r, c]);
        for (i, &y) in labels.iter().enumerate() {
            if y >= c {
                return shape_err(format!("label {y} out of range for {c} classes"));
            }
            onehot.data_mut()[i * c + y] = 1.0;
        }
        self.soft_cross_entropy(&onehot, logits, 1.0)
    }

    /// Backpropagates from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss)));
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            self.backprop_node(node, &gy, &mut grads)?;
            grads[idx] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) -> Result<()> {
        if !self.ng(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn acc_with(
        &self,
        grads: &mut [Option<Tensor>],
        v: Var,
        f: impl FnOnce(&mut [f64]),
    ) -> Result<()> {
        if !self.ng(v) {
            return Ok(());
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        f(slot.as_mut().expect("slot filled").data_mut());
        Ok(())
    }

    fn backprop_node(&self, node: &Node, gy: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let y = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                self.acc_with(grads, *a, |ga| matmul_nt_into(gy.data(), bv.data(), ga, m, n, k))?;
                self.acc_with(grads, *b, |gb| matmul_tn_into(av.data(), gy.data(), gb, m, k, n))?;
            }
            Op::MatMulNt(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[0]);
                self.acc_with(grads, *a, |ga| matmul_into(gy.data(), bv.data(), ga, m, n, k))?;
                self.acc_with(grads, *b, |gb| matmul_tn_into(gy.data(), av.data(), gb, m, n, k))?;
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, gy.clone())?;
                self.acc(grads, *b, gy.clone())?;
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, gy.clone())?;
                self.acc(grads, *b, gy.map(|v| -v))?;
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.ng(*a) {
                    self.acc(grads, *a, gy.zip_map(bv, |g, b| g * b)?)?;
                }
                if self.ng(*b) {
                    self.acc(grads, *b, gy.zip_map(av, |g, a| g * a)?)?;
                }
            }
            Op::AddRow(a, row) => {
                self.acc(grads, *a, gy.clone())?;
                let c = self.value(*row).numel();
                self.acc_with(grads, *row, |gr| {
                    for chunk in gy.data().chunks(c) {
                        for (o, v) in gr.iter_mut().zip(chunk) {
                            *o += v;
                        }
                    }
                })?;
            }
            Op::MulRow(a, row) => {
                let av = self.value(*a);
                let rv = self.value(*row).data();
                let c = rv.len();
                self.acc_with(grads, *a, |ga| {
                    for (gch, ych) in ga.chunks_mut(c).zip(gy.data().chunks(c)) {
                        for ((o, g), r) in gch.iter_mut().zip(ych).zip(rv) {
                            *o += g * r;
                        }
                    }
                })?;
                self.acc_with(grads, *row, |gr| {
                    for (ach, ych) in av.data().chunks(c).zip(gy.data().chunks(c)) {
                        for ((o, g), x) in gr.iter_mut().zip(ych).zip(ach) {
                            *o += g * x;
                        }
                    }
                })?;
            }
            Op::Scale(a, s) => self.acc(grads, *a, gy.map(|v| v * s))?,
            Op::Gelu(a) => {
                let g = gy.zip_map(self.value(*a), |g, x| g * gelu_grad(x))?;
                self.acc(grads, *a, g)?;
            }
            Op::Softmax { x, t } => {
                let (_, c) = dims2(y);
                self.acc_with(grads, *x, |gx| {
                    for ((o, yr), gr) in gx
                        .chunks_mut(c)
                        .zip(y.data().chunks(c))
                        .zip(gy.data().chunks(c))
                    {
                        let s = dot(yr, gr);
                        for ((ov, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
                            *ov += (gv - s) * yv / t;
                        }
                    }
                })?;
            }
            Op::LogSoftmax { x, t } => {
                let (_, c) = dims2(y);
                self.acc_with(grads, *x, |gx| {
                    for ((o, yr), gr) in gx
                        .chunks_mut(c)
                        .zip(y.data().chunks(c))
                        .zip(gy.data().chunks(c))
                    {
                        let s: f64 = gr.iter().sum();
                        for ((ov, &lp), &gv) in o.iter_mut().zip(yr).zip(gr) {
                            *ov += (gv - lp.exp() * s) / t;
                        }
                    }
                })?;
            }
            Op::LayerNorm { x, inv_std } => {
                let (_, c) = dims2(y);
                let n = c as f64;
                self.acc_with(grads, *x, |gx| {
                    for (((o, yr), gr), &inv) in gx
                        .chunks_mut(c)
                        .zip(y.data().chunks(c))
                        .zip(gy.data().chunks(c))
                        .zip(inv_std)
                    {
                        let mg = gr.iter().sum::<f64>() / n;
                        let mgy = dot(gr, yr) / n;
                        for ((ov, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
                            *ov += inv * (gv - mg - yv * mgy);
                        }
                    }
                })?;
            }
            Op::L2Normalize { x, norms } => {
                let (_, c) = dims2(y);
                self.acc_with(grads, *x, |gx| {
                    for (((o, yr), gr), &nrm) in gx
                        .chunks_mut(c)
                        .zip(y.data().chunks(c))
                        .zip(gy.data().chunks(c))
                        .zip(norms)
                    {
                        let s = dot(yr, gr);
                        for ((ov, &yv), &gv) in o.iter_mut().zip(yr).zip(gr) {
                            *ov += (gv - yv * s) / nrm;
                        }
                    }
                })?;
            }
            Op::Sum(x) => {
                let g = gy.data()[0];
                self.acc(grads, *x, Tensor::filled(self.shape(*x), g))?;
            }
            Op::Reshape(x) => self.acc(grads, *x, gy.reshape(self.shape(*x))?)?,
            Op::Transpose(x) => {
                let (r, c) = dims2(y);
                let g = Tensor::new(self.shape(*x).to_vec(), transpose_data(gy.data(), r, c))?;
                self.acc(grads, *x, g)?;
            }
            Op::SliceCols { x, start } => {
                let (_, w) = dims2(y);
                let (_, c) = dims2(self.value(*x));
                self.acc_with(grads, *x, |gx| {
                    for (o, g) in gx.chunks_mut(c).zip(gy.data().chunks(w)) {
                        for (ov, gv) in o[*start..*start + w].iter_mut().zip(g) {
                            *ov += gv;
                        }
                    }
                })?;
            }
            Op::SliceRows { x, start } => {
                let (_, c) = dims2(y);
                self.acc_with(grads, *x, |gx| {
                    for (ov, gv) in gx[start * c..].iter_mut().zip(gy.data()) {
                        *ov += gv;
                    }
                })?;
            }
            Op::ConcatRows(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.value(x).numel();
                    if self.ng(x) {
                        let g = Tensor::new(
                            self.shape(x).to_vec(),
                            gy.data()[off..off + n].to_vec(),
                        )?;
                        self.acc(grads, x, g)?;
                    }
                    off += n;
                }
            }
            Op::ConcatCols(xs) => {
                let (r, total) = dims2(y);
                let mut off = 0;
                for &x in xs {
                    let w = dims2(self.value(x)).1;
                    if self.ng(x) {
                        let mut d = Vec::with_capacity(r * w);
                        for i in 0..r {
                            d.extend_from_slice(&gy.data()[i * total + off..i * total + off + w]);
                        }
                        self.acc(grads, x, Tensor::new(vec![r, w], d)?)?;
                    }
                    off += w;
                }
            }
            Op::GatherRows { x, ids } => {
                let (_, c) = dims2(y);
                self.acc_with(grads, *x, |gx| {
                    for (i, &id) in ids.iter().enumerate() {
                        for (ov, gv) in gx[id * c..(id + 1) * c]
                            .iter_mut()
                            .zip(&gy.data()[i * c..(i + 1) * c])
                        {
                            *ov += gv;
                        }
                    }
                })?;
            }
            Op::GroupMeanRows { x, groups } => {
                let (_, c) = dims2(y);
                self.acc_with(grads, *x, |gx| {
                    for (gi, grp) in groups.iter().enumerate() {
                        let inv = 1.0 / grp.len() as f64;
                        let g = &gy.data()[gi * c..(gi + 1) * c];
                        for &i in grp {
                            for (ov, gv) in gx[i * c..(i + 1) * c].iter_mut().zip(g) {
                                *ov += gv * inv;
                            }
                        }
                    }
                })?;
            }
            Op::ReplaceRows { x, row, mask } => {
                let c = self.value(*row).numel();
                self.acc_with(grads, *x, |gx| {
                    for ((o, g), &m) in gx.chunks_mut(c).zip(gy.data().chunks(c)).zip(mask) {
                        if !m {
                            for (ov, gv) in o.iter_mut().zip(g) {
                                *ov += gv;
                            }
                        }
                    }
                })?;
                self.acc_with(grads, *row, |gr| {
                    for (g, &m) in gy.data().chunks(c).zip(mask) {
                        if m {
                            for (ov, gv) in gr.iter_mut().zip(g) {
                                *ov += gv;
                            }
                        }
                    }
                })?;
            }
            Op::BceWithLogits { logits, targets } => {
                let lv = self.value(*logits);
                let n = lv.numel() as f64;
                let g0 = gy.data()[0];
                let d: Vec<f64> = lv
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&x, &t)| g0 * (sigmoid(x) - t) / n)
                    .collect();
                self.acc(grads, *logits, Tensor::new(lv.shape().to_vec(), d)?)?;
            }
        }
        Ok(())
    }
}

/// Named parameter tensors, ordered by name so iteration is deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamSet {
    tensors: BTreeMap<String, Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.tensors.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.tensors.get(name).ok_or_else(|| Error::UnknownName {
            kind: "parameter",
            name: name.to_string(),
        })
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Tensor> {
        self.tensors.get_mut(name).ok_or_else(|| Error::UnknownName {
            kind: "parameter",
            name: name.to_string(),
        })
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Tensor)> {
        self.tensors.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.tensors.keys()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::numel).sum()
    }

    /// Records every tensor on the tape, differentiable iff `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> Bound {
        let vars = self
            .tensors
            .iter()
            .map(|(k, t)| {
                let v = if trainable {
                    tape.param(t.clone())
                } else {
                    tape.constant(t.clone())
                };
                (k.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Copies `other`'s tensors in under `prefix` + name.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamSet) {
        for (k, t) in other.iter() {
            self.insert(format!("{prefix}{k}"), t.clone());
        }
    }

    /// Tensors whose names start with `prefix`, with the prefix stripped.
    pub fn strip_prefix(&self, prefix: &str) -> ParamSet {
        let mut out = ParamSet::new();
        for (k, t) in self.iter() {
            if let Some(rest) = k.strip_prefix(prefix) {
                out.insert(rest, t.clone());
            }
        }
        out
    }
}

/// Tape handles for a bound [`ParamSet`].
#[derive(Clone, Debug, Default)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars.get(name).copied().ok_or_else(|| Error::UnknownName {
            kind: "bound parameter",
            name: name.to_string(),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    pub fn merge(&mut self, other: Bound) {
        self.vars.extend(other.vars);
    }

    /// Per-parameter gradients; parameters the loss never touched get zeros.
    pub fn gradients(&self, tape: &Tape, grads: &Gradients) -> BTreeMap<String, Tensor> {
        self.vars
            .iter()
            .filter(|(_, v)| tape.requires_grad(**v))
            .map(|(k, &v)| {
                let g = grads
                    .get(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(tape.shape(v)));
                (k.clone(), g)
            })
            .collect()
    }
}
