//! Reverse-mode differentiation over a linear tape of tensor operations.
//!
//! Nodes are appended in evaluation order, so walking the tape backwards
//! visits every node after all of its consumers.

use std::rc::Rc;

use super::conv::{self, ConvGeom};
use super::param::{ParamId, ParamStore};
use super::tensor::{axis_split, gemm, softmax, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Bmm(Var, Var),
    Transpose12(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Square(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    Reshape(Var),
    Conv2d {
        x: Var,
        k: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    AvgPool(Var, usize),
    GatherLast(Var, Rc<Vec<usize>>),
    SliceAxis1(Var, usize),
    Concat1(Vec<Var>),
    GatherRows(Var, Rc<Vec<usize>>),
    ScatterRows(Var, Rc<Vec<usize>>),
    ScaleRows(Var, Var),
    GatherFlat(Var, Rc<Vec<usize>>),
    SumAxis(Var, usize),
    SumAll(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// A recording of one forward computation.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; `backward` on it yields no gradients.
    pub fn inference() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: false,
        }
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, parents: &[Var]) -> Var {
        let needs_grad = self.grad_enabled && parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.push_flag(value, op, needs_grad)
    }

    fn push_flag(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        debug_assert!(value.is_finite(), "non-finite value produced by {op:?}");
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// A differentiable input.
    pub fn input(&mut self, t: Tensor) -> Var {
        let g = self.grad_enabled;
        self.push_flag(t, Op::Leaf, g)
    }

    /// A constant; no gradient flows into it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_flag(t, Op::Leaf, false)
    }

    /// Reads a parameter from `store`; its gradient is reported under `id`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let g = self.grad_enabled;
        self.push_flag(store.value(id).clone(), Op::Param(id), g)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let out = super::tensor::matmul(ta, tb)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    /// Batched product `[B, m, k] · [B, k, n] -> [B, m, n]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] || sa[2] != sb[1] {
            return Err(shape_err("bmm", ta, tb));
        }
        let (bs, m, k, n) = (sa[0], sa[1], sa[2], sb[2]);
        let mut out = vec![0.0; bs * m * n];
        for b_ in 0..bs {
            gemm(
                m,
                k,
                n,
                &ta.data()[b_ * m * k..],
                k as isize,
                1,
                &tb.data()[b_ * k * n..],
                n as isize,
                1,
                &mut out[b_ * m * n..(b_ + 1) * m * n],
                0.0,
            );
        }
        Ok(self.push(Tensor::from_parts(vec![bs, m, n], out), Op::Bmm(a, b), &[a, b]))
    }

    /// Swaps the last two axes of a rank-3 tensor.
    pub fn transpose12(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() != 3 {
            return Err(Error::invalid(format!("transpose12 needs rank 3, got {:?}", t.shape())));
        }
        let out = transpose12(t);
        Ok(self.push(out, Op::Transpose12(a), &[a]))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        Ok(self.push(out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds `b` (shape `[n]`) to every length-`n` row of `x`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(b));
        let n = *tx.shape().last().unwrap();
        if tb.shape() != [n] {
            return Err(shape_err("add_bias", tx, tb));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, bb) in row.iter_mut().zip(tb.data()) {
                *v += bb;
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        Ok(self.push(out, Op::AddBias(x, b), &[x, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|v| v * c);
        self.push(out, Op::Scale(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| if v > 0.0 { v } else { 0.0 });
        self.push(out, Op::Relu(a), &[a])
    }

    pub fn square(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|v| v * v);
        self.push(out, Op::Square(a), &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let out = softmax(self.value(a), axis)?;
        Ok(self.push(out, Op::Softmax(a, axis), &[a]))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a);
        if axis >= t.rank() {
            return Err(Error::invalid(format!("log_softmax axis {axis} out of range")));
        }
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let mut out = t.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| t.data()[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                let lse = max + (0..len).map(|j| (t.data()[idx(j)] - max).exp()).sum::<f64>().ln();
                for j in 0..len {
                    out[idx(j)] = t.data()[idx(j)] - lse;
                }
            }
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        Ok(self.push(out, Op::LogSoftmax(a, axis), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        Ok(self.push(out, Op::Reshape(a), &[a]))
    }

    /// NHWC convolution with square kernels `[k, k, c_in, c_out]`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(k), stride, pad)?;
        let (out, cols) = conv::forward(self.value(x), self.value(k), &geom);
        let keep = if self.grad_enabled { cols } else { Vec::new() };
        Ok(self.push(out, Op::Conv2d { x, k, geom, cols: keep }, &[x, k]))
    }

    /// Non-overlapping `rho × rho` mean pooling over NHWC input.
    pub fn avg_pool(&mut self, x: Var, rho: usize) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 4 || rho == 0 || s[1] % rho != 0 || s[2] % rho != 0 {
            return Err(Error::invalid(format!(
                "avg_pool: patch extent {rho} must divide the spatial extents of {s:?}"
            )));
        }
        let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
        let (ph, pw) = (h / rho, w / rho);
        let mut out = vec![0.0; b * ph * pw * c];
        let norm = 1.0 / (rho * rho) as f64;
        for bi in 0..b {
            for y in 0..h {
                for xx in 0..w {
                    let src = ((bi * h + y) * w + xx) * c;
                    let dst = ((bi * ph + y / rho) * pw + xx / rho) * c;
                    for ch in 0..c {
                        out[dst + ch] += t.data()[src + ch] * norm;
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![b, ph, pw, c], out);
        Ok(self.push(out, Op::AvgPool(x, rho), &[x]))
    }

    /// `out[.., j] = x[.., idx[j]]` along the last axis.
    pub fn gather_last(&mut self, x: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let t = self.value(x);
        let n = *t.shape().last().unwrap();
        if idx.iter().any(|&i| i >= n) || idx.is_empty() {
            return Err(Error::invalid("gather_last index out of range"));
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = idx.len();
        let data = t
            .data()
            .chunks(n)
            .flat_map(|row| idx.iter().map(move |&i| row[i]))
            .collect();
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(out, Op::GatherLast(x, idx), &[x]))
    }

    /// `x[:, start..start + len, :]` of a rank-3 tensor.
    pub fn slice_axis1(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let s = t.shape();
        if s.len() != 3 || len == 0 || start + len > s[1] {
            return Err(Error::invalid(format!("slice_axis1 {start}+{len} out of range for {s:?}")));
        }
        let (b, m, d) = (s[0], s[1], s[2]);
        let mut data = Vec::with_capacity(b * len * d);
        for bi in 0..b {
            data.extend_from_slice(&t.data()[(bi * m + start) * d..(bi * m + start + len) * d]);
        }
        let out = Tensor::from_parts(vec![b, len, d], data);
        Ok(self.push(out, Op::SliceAxis1(x, start), &[x]))
    }

    /// Concatenates rank-3 tensors along axis 1.
    pub fn concat_axis1(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?);
        let (b, d) = (first.shape()[0], first.shape()[2]);
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 3 || s[0] != b || s[2] != d {
                return Err(shape_err("concat_axis1", first, self.value(p)));
            }
            total += s[1];
        }
        let mut data = Vec::with_capacity(b * total * d);
        for bi in 0..b {
            for &p in parts {
                let t = self.value(p);
                let m = t.shape()[1];
                data.extend_from_slice(&t.data()[bi * m * d..(bi + 1) * m * d]);
            }
        }
        let out = Tensor::from_parts(vec![b, total, d], data);
        Ok(self.push(out, Op::Concat1(parts.to_vec()), parts))
    }

    /// Selects rows of a rank-2 tensor.
    pub fn gather_rows(&mut self, x: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || idx.is_empty() || idx.iter().any(|&i| i >= t.shape()[0]) {
            return Err(Error::invalid("gather_rows index out of range"));
        }
        let d = t.shape()[1];
        let data = idx.iter().flat_map(|&i| t.row(i).iter().copied()).collect();
        let out = Tensor::from_parts(vec![idx.len(), d], data);
        Ok(self.push(out, Op::GatherRows(x, idx), &[x]))
    }

    /// Adds row `r` of `x` into row `idx[r]` of a zero `[n, d]` tensor.
    pub fn scatter_rows(&mut self, x: Var, idx: Rc<Vec<usize>>, n: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || idx.len() != t.shape()[0] || idx.iter().any(|&i| i >= n) {
            return Err(Error::invalid("scatter_rows index out of range"));
        }
        let d = t.shape()[1];
        let mut data = vec![0.0; n * d];
        for (r, &i) in idx.iter().enumerate() {
            for (o, v) in data[i * d..(i + 1) * d].iter_mut().zip(t.row(r)) {
                *o += v;
            }
        }
        let out = Tensor::from_parts(vec![n, d], data);
        Ok(self.push(out, Op::ScatterRows(x, idx), &[x]))
    }

    /// Multiplies row `r` of `x` (`[k, d]`) by `w[r]` (`w` has shape `[k]`).
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (tx, tw) = (self.value(x), self.value(w));
        if tx.rank() != 2 || tw.shape() != [tx.shape()[0]] {
            return Err(shape_err("scale_rows", tx, tw));
        }
        let d = tx.shape()[1];
        let mut data = tx.data().to_vec();
        for (row, &s) in data.chunks_mut(d).zip(tw.data()) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), data);
        Ok(self.push(out, Op::ScaleRows(x, w), &[x, w]))
    }

    /// Picks flat (row-major) positions of `x` into a `[k]` vector.
    pub fn gather_flat(&mut self, x: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let t = self.value(x);
        if idx.is_empty() || idx.iter().any(|&i| i >= t.len()) {
            return Err(Error::invalid("gather_flat index out of range"));
        }
        let data = idx.iter().map(|&i| t.data()[i]).collect();
        let out = Tensor::from_parts(vec![idx.len()], data);
        Ok(self.push(out, Op::GatherFlat(x, idx), &[x]))
    }

    /// Sums out `axis`; a rank-1 input reduces to shape `[1]`.
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::invalid(format!("sum_axis {axis} out of range for {:?}", t.shape())));
        }
        let (outer, len, inner) = axis_split(t.shape(), axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for j in 0..len {
                let src = &t.data()[(o * len + j) * inner..(o * len + j + 1) * inner];
                for (d, s) in data[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *d += s;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let out = Tensor::from_parts(shape, data);
        Ok(self.push(out, Op::SumAxis(x, axis), &[x]))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let n = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::invalid("mean_axis out of range"))?;
        let s = self.sum_axis(x, axis)?;
        Ok(self.scale(s, 1.0 / n as f64))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::SumAll(x), &[x])
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len();
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Reverse sweep from a single-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::invalid(format!(
                "backward needs a single-element loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if !self.nodes[loss.0].needs_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop(&node.op, &node.value, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Ok(Gradients { grads })
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot => *slot = Some(g),
        }
    }

    fn acc_data(&self, grads: &mut [Option<Tensor>], v: Var, data: Vec<f64>) {
        let shape = self.shape(v).to_vec();
        self.acc(grads, v, Tensor::from_parts(shape, data));
    }

    fn backprop(&self, op: &Op, y: &Tensor, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        match op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.needs(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm(m, n, k, dy.data(), n as isize, 1, tb.data(), 1, n as isize, &mut da, 0.0);
                    self.acc_data(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), 1, k as isize, dy.data(), n as isize, 1, &mut db, 0.0);
                    self.acc_data(grads, *b, db);
                }
            }
            Op::Bmm(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (bs, m, k, n) = (ta.shape()[0], ta.shape()[1], ta.shape()[2], tb.shape()[2]);
                if self.needs(*a) {
                    let mut da = vec![0.0; bs * m * k];
                    for i in 0..bs {
                        gemm(
                            m,
                            n,
                            k,
                            &dy.data()[i * m * n..],
                            n as isize,
                            1,
                            &tb.data()[i * k * n..],
                            1,
                            n as isize,
                            &mut da[i * m * k..(i + 1) * m * k],
                            0.0,
                        );
                    }
                    self.acc_data(grads, *a, da);
                }
                if self.needs(*b) {
                    let mut db = vec![0.0; bs * k * n];
                    for i in 0..bs {
                        gemm(
                            k,
                            m,
                            n,
                            &ta.data()[i * m * k..],
                            1,
                            k as isize,
                            &dy.data()[i * m * n..],
                            n as isize,
                            1,
                            &mut db[i * k * n..(i + 1) * k * n],
                            0.0,
                        );
                    }
                    self.acc_data(grads, *b, db);
                }
            }
            Op::Transpose12(a) => self.acc(grads, *a, transpose12(dy)),
            Op::Add(a, b) => {
                self.acc(grads, *a, dy.clone());
                self.acc(grads, *b, dy.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, dy.clone());
                self.acc(grads, *b, dy.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.needs(*a) {
                    let d = dy.data().iter().zip(tb.data()).map(|(g, v)| g * v).collect();
                    self.acc_data(grads, *a, d);
                }
                if self.needs(*b) {
                    let d = dy.data().iter().zip(ta.data()).map(|(g, v)| g * v).collect();
                    self.acc_data(grads, *b, d);
                }
            }
            Op::AddBias(x, b) => {
                self.acc(grads, *x, dy.clone());
                if self.needs(*b) {
                    let n = self.value(*b).len();
                    let mut db = vec![0.0; n];
                    for row in dy.data().chunks(n) {
                        for (d, g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    self.acc_data(grads, *b, db);
                }
            }
            Op::Scale(a, c) => self.acc(grads, *a, dy.map(|v| v * c)),
            Op::Relu(a) => {
                let x = self.value(*a);
                let d = dy
                    .data()
                    .iter()
                    .zip(x.data())
                    .map(|(&g, &v)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                self.acc_data(grads, *a, d);
            }
            Op::Square(a) => {
                let x = self.value(*a);
                let d = dy.data().iter().zip(x.data()).map(|(g, v)| 2.0 * v * g).collect();
                self.acc_data(grads, *a, d);
            }
            Op::Softmax(a, axis) => {
                let (outer, len, inner) = axis_split(y.shape(), *axis);
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: f64 = (0..len).map(|j| dy.data()[idx(j)] * y.data()[idx(j)]).sum();
                        for j in 0..len {
                            d[idx(j)] = y.data()[idx(j)] * (dy.data()[idx(j)] - dot);
                        }
                    }
                }
                self.acc_data(grads, *a, d);
            }
            Op::LogSoftmax(a, axis) => {
                let (outer, len, inner) = axis_split(y.shape(), *axis);
                let mut d = vec![0.0; y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let total: f64 = (0..len).map(|j| dy.data()[idx(j)]).sum();
                        for j in 0..len {
                            d[idx(j)] = dy.data()[idx(j)] - y.data()[idx(j)].exp() * total;
                        }
                    }
                }
                self.acc_data(grads, *a, d);
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                self.acc(grads, *a, Tensor::from_parts(shape, dy.data().to_vec()));
            }
            Op::Conv2d { x, k, geom, cols } => {
                let (dx, dk) = conv::backward(dy, self.value(*k), cols, geom);
                self.acc_data(grads, *x, dx);
                self.acc_data(grads, *k, dk);
            }
            Op::AvgPool(x, rho) => {
                let s = self.shape(*x);
                let (b, h, w, c) = (s[0], s[1], s[2], s[3]);
                let (ph, pw) = (h / rho, w / rho);
                let norm = 1.0 / (rho * rho) as f64;
                let mut d = vec![0.0; b * h * w * c];
                for bi in 0..b {
                    for yy in 0..h {
                        for xx in 0..w {
                            let dst = ((bi * h + yy) * w + xx) * c;
                            let src = ((bi * ph + yy / rho) * pw + xx / rho) * c;
                            for ch in 0..c {
                                d[dst + ch] = dy.data()[src + ch] * norm;
                            }
                        }
                    }
                }
                self.acc_data(grads, *x, d);
            }
            Op::GatherLast(x, idx) => {
                let n = *self.shape(*x).last().unwrap();
                let mut d = vec![0.0; self.value(*x).len()];
                for (r, row) in dy.data().chunks(idx.len()).enumerate() {
                    for (&i, g) in idx.iter().zip(row) {
                        d[r * n + i] += g;
                    }
                }
                self.acc_data(grads, *x, d);
            }
            Op::SliceAxis1(x, start) => {
                let s = self.shape(*x);
                let (b, m, dd) = (s[0], s[1], s[2]);
                let len = y.shape()[1];
                let mut d = vec![0.0; b * m * dd];
                for bi in 0..b {
                    d[(bi * m + start) * dd..(bi * m + start + len) * dd]
                        .copy_from_slice(&dy.data()[bi * len * dd..(bi + 1) * len * dd]);
                }
                self.acc_data(grads, *x, d);
            }
            Op::Concat1(parts) => {
                let (b, total, dd) = (y.shape()[0], y.shape()[1], y.shape()[2]);
                let mut offset = 0;
                for &p in parts {
                    let m = self.shape(p)[1];
                    if self.needs(p) {
                        let mut d = Vec::with_capacity(b * m * dd);
                        for bi in 0..b {
                            let start = (bi * total + offset) * dd;
                            d.extend_from_slice(&dy.data()[start..start + m * dd]);
                        }
                        self.acc_data(grads, p, d);
                    }
                    offset += m;
                }
            }
            Op::GatherRows(x, idx) => {
                let d_ = self.shape(*x)[1];
                let mut d = vec![0.0; self.value(*x).len()];
                for (r, &i) in idx.iter().enumerate() {
                    for (o, g) in d[i * d_..(i + 1) * d_].iter_mut().zip(dy.row(r)) {
                        *o += g;
                    }
                }
                self.acc_data(grads, *x, d);
            }
            Op::ScatterRows(x, idx) => {
                let d_ = dy.shape()[1];
                let d = idx.iter().flat_map(|&i| dy.data()[i * d_..(i + 1) * d_].iter().copied()).collect();
                self.acc_data(grads, *x, d);
            }
            Op::ScaleRows(x, w) => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let d_ = tx.shape()[1];
                if self.needs(*x) {
                    let mut d = dy.data().to_vec();
                    for (row, &s) in d.chunks_mut(d_).zip(tw.data()) {
                        row.iter_mut().for_each(|v| *v *= s);
                    }
                    self.acc_data(grads, *x, d);
                }
                if self.needs(*w) {
                    let d = dy
                        .data()
                        .chunks(d_)
                        .zip(tx.data().chunks(d_))
                        .map(|(g, v)| g.iter().zip(v).map(|(a, b)| a * b).sum())
                        .collect();
                    self.acc_data(grads, *w, d);
                }
            }
            Op::GatherFlat(x, idx) => {
                let mut d = vec![0.0; self.value(*x).len()];
                for (&i, g) in idx.iter().zip(dy.data()) {
                    d[i] += g;
                }
                self.acc_data(grads, *x, d);
            }
            Op::SumAxis(x, axis) => {
                let (outer, len, inner) = axis_split(self.shape(*x), *axis);
                let mut d = vec![0.0; outer * len * inner];
                for o in 0..outer {
                    for j in 0..len {
                        d[(o * len + j) * inner..(o * len + j + 1) * inner]
                            .copy_from_slice(&dy.data()[o * inner..(o + 1) * inner]);
                    }
                }
                self.acc_data(grads, *x, d);
            }
            Op::SumAll(x) => {
                let n = self.value(*x).len();
                self.acc_data(grads, *x, vec![dy.data()[0]; n]);
            }
        }
    }

    /// Parameter gradients reachable from `grads`, summed per parameter.
    pub fn param_grads<'a>(&'a self, grads: &'a Gradients) -> impl Iterator<Item = (ParamId, &'a Tensor)> + 'a {
        self.nodes.iter().enumerate().filter_map(move |(i, n)| match n.op {
            Op::Param(id) => grads.grads[i].as_ref().map(|g| (id, g)),
            _ => None,
        })
    }

    /// Adds every parameter gradient into `store`.
    pub fn accumulate_into(&self, grads: &Gradients, store: &mut ParamStore) {
        for (id, g) in self.param_grads(grads) {
            store.accumulate_grad(id, g);
        }
    }
}

fn transpose12(t: &Tensor) -> Tensor {
    let s = t.shape();
    let (b, m, n) = (s[0], s[1], s[2]);
    let mut out = vec![0.0; t.len()];
    for bi in 0..b {
        for i in 0..m {
            for j in 0..n {
                out[(bi * n + j) * m + i] = t.data()[(bi * m + i) * n + j];
            }
        }
    }
    Tensor::from_parts(vec![b, n, m], out)
}

/// Gradients of one backward sweep, indexed by tape node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}
