//! Reverse-mode automatic differentiation over a linear operation tape.
//!
//! Every primitive evaluates eagerly, appends a node holding its output and
//! whatever it needs for the backward pass, and returns a [`Var`] handle.
//! [`Tape::backward`] walks the nodes in exact reverse execution order.

use std::collections::BTreeMap;

use crate::error::{Result, TensorError};
use crate::nn;
use crate::param::{ParamId, ParamStore};
use crate::tensor::{kernels, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Input,
    Param(ParamId),
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Minimum(Var, Var),
    Maximum(Var, Var),
    AddConst(Var),
    MulConst(Var, Tensor),
    Scale(Var, f64),
    Clamp(Var, f64, f64),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    SoftmaxRows(Var),
    Conv1d {
        x: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
        cols: Vec<f64>,
    },
    Upsample2(Var),
    Rows(Var, usize),
    Gather(Var, Vec<usize>),
    Sum(Var),
    BceWithLogits(Var, Vec<f64>),
    SmoothL1(Var, Vec<f64>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Single-threaded record of executed primitives.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Result of [`Tape::backward`]: per-node and per-parameter gradients.
#[derive(Debug, Clone)]
pub struct Gradients {
    nodes: Vec<Option<Tensor>>,
    params: BTreeMap<ParamId, Tensor>,
    visited: Vec<Var>,
}

impl Gradients {
    /// Gradient of the loss with respect to a recorded value.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.nodes.get(v.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.get(&id)
    }

    /// Nodes in the order the backward pass processed them.
    pub fn visited(&self) -> &[Var] {
        &self.visited
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input value. Gradients with respect to inputs are
    /// available from [`Gradients::wrt`].
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.push("input", value, Op::Input)
    }

    /// Records the current value of a parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Result<Var> {
        let value = store.value(id).clone();
        self.push("param", value, Op::Param(id))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose2()?;
        self.push("transpose", out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip(a, b, |x, y| x + y);
        self.push("add", out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip(a, b, |x, y| x - y);
        self.push("sub", out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip(a, b, |x, y| x * y);
        self.push("mul", out, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        let out = self.zip(a, b, |x, y| x / y);
        self.push("div", out, Op::Div(a, b))
    }

    /// Element-wise minimum; ties route the gradient to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("minimum", a, b)?;
        let out = self.zip(a, b, |x, y| if x <= y { x } else { y });
        self.push("minimum", out, Op::Minimum(a, b))
    }

    /// Element-wise maximum; ties route the gradient to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("maximum", a, b)?;
        let out = self.zip(a, b, |x, y| if x >= y { x } else { y });
        self.push("maximum", out, Op::Maximum(a, b))
    }

    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        if self.shape(a) != c.shape() {
            return Err(TensorError::shape("add_const", self.shape(a), c.shape()));
        }
        let ta = self.value(a);
        let data = ta.data().iter().zip(c.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("add_const", out, Op::AddConst(a))
    }

    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        if self.shape(a) != c.shape() {
            return Err(TensorError::shape("mul_const", self.shape(a), c.shape()));
        }
        let ta = self.value(a);
        let data = ta.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("mul_const", out, Op::MulConst(a, c.clone()))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let out = self.value(a).map(|x| x * factor);
        self.push("scale", out, Op::Scale(a, factor))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if lo > hi {
            return Err(TensorError::contract("clamp", format!("lo {lo} > hi {hi}")));
        }
        let out = self.value(a).map(|x| x.clamp(lo, hi));
        self.push("clamp", out, Op::Clamp(a, lo, hi))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|x| x.max(0.0));
        self.push("relu", out, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(nn::sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(f64::exp);
        self.push("exp", out, Op::Exp(a))
    }

    /// Softmax along the last axis of a matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.value(a).dims2("softmax_rows")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &src[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let dst = &mut out[i * n..(i + 1) * n];
            let mut total = 0.0;
            for (d, &x) in dst.iter_mut().zip(row) {
                *d = (x - max).exp();
                total += *d;
            }
            for d in dst.iter_mut() {
                *d /= total;
            }
        }
        let out = Tensor::new(vec![m, n], out)?;
        self.push("softmax_rows", out, Op::SoftmaxRows(a))
    }

    /// 1-D cross-correlation of `x [C_in×T]` with `weight [C_out×C_in×k]`
    /// plus `bias [C_out]`, zero padding on both ends.
    pub fn conv1d(
        &mut self,
        x: Var,
        weight: Var,
        bias: Var,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let (c_in, t_in) = self.value(x).dims2("conv1d")?;
        let (c_out, k) = match self.shape(weight) {
            &[o, i, k] if i == c_in => (o, k),
            other => return Err(TensorError::shape("conv1d", self.shape(x), other)),
        };
        if self.shape(bias) != [c_out] {
            return Err(TensorError::shape("conv1d", self.shape(weight), self.shape(bias)));
        }
        if stride == 0 {
            return Err(TensorError::contract("conv1d", "stride must be at least 1"));
        }
        if t_in + 2 * padding < k {
            return Err(TensorError::contract(
                "conv1d",
                format!("kernel width {k} exceeds padded input length {}", t_in + 2 * padding),
            ));
        }
        let t_out = (t_in + 2 * padding - k) / stride + 1;
        let cols = im2col(self.value(x).data(), c_in, t_in, k, stride, padding, t_out);
        let mut out = vec![0.0; c_out * t_out];
        let b = self.value(bias).data();
        for (o, row) in out.chunks_mut(t_out).enumerate() {
            row.fill(b[o]);
        }
        kernels::matmul(self.value(weight).data(), &cols, &mut out, c_out, c_in * k, t_out);
        let out = Tensor::new(vec![c_out, t_out], out)?;
        self.push(
            "conv1d",
            out,
            Op::Conv1d {
                x,
                weight,
                bias,
                stride,
                padding,
                cols,
            },
        )
    }

    /// Nearest-neighbour ×2 upsampling along the time axis of `[C×T]`.
    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        let (c, t) = self.value(a).dims2("upsample2")?;
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(c * t * 2);
        for row in src.chunks(t) {
            for &v in row {
                out.push(v);
                out.push(v);
            }
        }
        let out = Tensor::new(vec![c, 2 * t], out)?;
        self.push("upsample2", out, Op::Upsample2(a))
    }

    /// Rows `start..start+len` of a matrix.
    pub fn rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.value(a).dims2("rows")?;
        if len == 0 || start + len > m {
            return Err(TensorError::contract(
                "rows",
                format!("rows {start}..{} out of range for {m}", start + len),
            ));
        }
        let data = self.value(a).data()[start * n..(start + len) * n].to_vec();
        let out = Tensor::new(vec![len, n], data)?;
        self.push("rows", out, Op::Rows(a, start))
    }

    /// Picks elements by flat row-major index into a vector.
    pub fn gather(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let src = self.value(a).data();
        if indices.is_empty() {
            return Err(TensorError::contract("gather", "no indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= src.len()) {
            return Err(TensorError::contract(
                "gather",
                format!("index {bad} out of range for {} values", src.len()),
            ));
        }
        let data = indices.iter().map(|&i| src[i]).collect();
        let out = Tensor::vector(data)?;
        self.push("gather", out, Op::Gather(a, indices.to_vec()))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(a).sum());
        self.push("sum", out, Op::Sum(a))
    }

    /// Element-wise binary cross-entropy on logits against constant targets.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let t = self.value(logits);
        if t.numel() != targets.len() {
            return Err(TensorError::shape("bce_with_logits", t.shape(), &[targets.len()]));
        }
        let data = t
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &y)| nn::bce_with_logits(z, y))
            .collect::<Result<Vec<_>>>()?;
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push("bce_with_logits", out, Op::BceWithLogits(logits, targets.to_vec()))
    }

    /// Element-wise smooth-L1 against constant targets.
    pub fn smooth_l1(&mut self, pred: Var, targets: &[f64]) -> Result<Var> {
        let t = self.value(pred);
        if t.numel() != targets.len() {
            return Err(TensorError::shape("smooth_l1", t.shape(), &[targets.len()]));
        }
        let data = t
            .data()
            .iter()
            .zip(targets)
            .map(|(&p, &y)| nn::smooth_l1(p, y))
            .collect();
        let out = Tensor::new(t.shape().to_vec(), data)?;
        self.push("smooth_l1", out, Op::SmoothL1(pred, targets.to_vec()))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(TensorError::contract(
                "backward",
                format!("loss must be a scalar, got shape {:?}", self.shape(loss)),
            ));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        let mut params = BTreeMap::new();
        let mut visited = Vec::new();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            visited.push(Var(idx));
            let node = &self.nodes[idx];
            self.propagate(node, &g, &mut grads, &mut params)?;
            grads[idx] = Some(g);
        }
        Ok(Gradients {
            nodes: grads,
            params,
            visited,
        })
    }

    fn propagate(
        &self,
        node: &Node,
        g: &Tensor,
        grads: &mut [Option<Tensor>],
        params: &mut BTreeMap<ParamId, Tensor>,
    ) -> Result<()> {
        let mut acc = |v: Var, delta: Tensor| -> Result<()> {
            match &mut grads[v.0] {
                Some(existing) => existing.add_assign(&delta),
                slot => {
                    *slot = Some(delta);
                    Ok(())
                }
            }
        };
        let gd = g.data();
        let elementwise = |_: Var, f: &dyn Fn(usize, f64) -> f64| -> Tensor {
            let data = gd.iter().enumerate().map(|(i, &gi)| f(i, gi)).collect();
            Tensor::new(g.shape().to_vec(), data).expect("shape preserved")
        };

        match &node.op {
            Op::Input => {}
            Op::Param(id) => match params.get_mut(id) {
                Some(existing) => existing.add_assign(g)?,
                None => {
                    params.insert(*id, g.clone());
                }
            },
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2("matmul")?;
                let (_, n) = tb.dims2("matmul")?;
                let mut da = vec![0.0; m * k];
                kernels::matmul_a_bt(gd, tb.data(), &mut da, m, n, k);
                let mut db = vec![0.0; k * n];
                kernels::matmul_at_b(ta.data(), gd, &mut db, m, k, n);
                acc(*a, Tensor::new(vec![m, k], da)?)?;
                acc(*b, Tensor::new(vec![k, n], db)?)?;
            }
            Op::Transpose(a) => acc(*a, g.transpose2()?)?,
            Op::Add(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.clone())?;
            }
            Op::Sub(a, b) => {
                acc(*a, g.clone())?;
                acc(*b, g.map(|x| -x))?;
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, elementwise(*a, &|i, gi| gi * tb[i]))?;
                acc(*b, elementwise(*b, &|i, gi| gi * ta[i]))?;
            }
            Op::Div(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, elementwise(*a, &|i, gi| gi / tb[i]))?;
                acc(*b, elementwise(*b, &|i, gi| -gi * ta[i] / (tb[i] * tb[i])))?;
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                let is_min = matches!(node.op, Op::Minimum(..));
                let pick_a = |i: usize| if is_min { ta[i] <= tb[i] } else { ta[i] >= tb[i] };
                acc(*a, elementwise(*a, &|i, gi| if pick_a(i) { gi } else { 0.0 }))?;
                acc(*b, elementwise(*b, &|i, gi| if pick_a(i) { 0.0 } else { gi }))?;
            }
            Op::AddConst(a) => acc(*a, g.clone())?,
            Op::MulConst(a, c) => {
                let cd = c.data();
                acc(*a, elementwise(*a, &|i, gi| gi * cd[i]))?;
            }
            Op::Scale(a, factor) => acc(*a, g.map(|x| x * factor))?,
            Op::Clamp(a, lo, hi) => {
                let ta = self.value(*a).data();
                acc(
                    *a,
                    elementwise(*a, &|i, gi| if ta[i] < *lo || ta[i] > *hi { 0.0 } else { gi }),
                )?;
            }
            Op::Relu(a) => {
                let ta = self.value(*a).data();
                acc(*a, elementwise(*a, &|i, gi| if ta[i] > 0.0 { gi } else { 0.0 }))?;
            }
            Op::Sigmoid(a) => {
                let y = node.value.data();
                acc(*a, elementwise(*a, &|i, gi| gi * y[i] * (1.0 - y[i])))?;
            }
            Op::Exp(a) => {
                let y = node.value.data();
                acc(*a, elementwise(*a, &|i, gi| gi * y[i]))?;
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = node.value.dims2("softmax_rows")?;
                let y = node.value.data();
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let yr = &y[i * n..(i + 1) * n];
                    let gr = &gd[i * n..(i + 1) * n];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dx[i * n + j] = yr[j] * (gr[j] - dot);
                    }
                }
                acc(*a, Tensor::new(vec![m, n], dx)?)?;
            }
            Op::Conv1d {
                x,
                weight,
                bias,
                stride,
                padding,
                cols,
            } => {
                let (c_in, t_in) = self.value(*x).dims2("conv1d")?;
                let w = self.value(*weight);
                let (c_out, k) = (w.shape()[0], w.shape()[2]);
                let t_out = g.shape()[1];

                let mut dw = vec![0.0; c_out * c_in * k];
                kernels::matmul_a_bt(gd, cols, &mut dw, c_out, t_out, c_in * k);
                let db = gd.chunks(t_out).map(|row| row.iter().sum()).collect();
                let mut dcols = vec![0.0; c_in * k * t_out];
                kernels::matmul_at_b(w.data(), gd, &mut dcols, c_out, c_in * k, t_out);
                let dx = col2im(&dcols, c_in, t_in, k, *stride, *padding, t_out);

                acc(*x, Tensor::new(vec![c_in, t_in], dx)?)?;
                acc(*weight, Tensor::new(vec![c_out, c_in, k], dw)?)?;
                acc(*bias, Tensor::new(vec![c_out], db)?)?;
            }
            Op::Upsample2(a) => {
                let (c, t) = self.value(*a).dims2("upsample2")?;
                let dx = gd.chunks(2).map(|pair| pair[0] + pair[1]).collect();
                acc(*a, Tensor::new(vec![c, t], dx)?)?;
            }
            Op::Rows(a, start) => {
                let ta = self.value(*a);
                let n = ta.shape()[1];
                let mut dx = Tensor::zeros(ta.shape());
                dx.data_mut()[start * n..start * n + gd.len()].copy_from_slice(gd);
                acc(*a, dx)?;
            }
            Op::Gather(a, indices) => {
                let mut dx = Tensor::zeros(self.shape(*a));
                let d = dx.data_mut();
                for (&i, &gi) in indices.iter().zip(gd) {
                    d[i] += gi;
                }
                acc(*a, dx)?;
            }
            Op::Sum(a) => acc(*a, Tensor::full(self.shape(*a), gd[0]))?,
            Op::BceWithLogits(a, targets) => {
                let z = self.value(*a).data();
                acc(
                    *a,
                    elementwise(*a, &|i, gi| gi * nn::bce_with_logits_grad(z[i], targets[i])),
                )?;
            }
            Op::SmoothL1(a, targets) => {
                let p = self.value(*a).data();
                acc(
                    *a,
                    elementwise(*a, &|i, gi| gi * nn::smooth_l1_grad(p[i], targets[i])),
                )?;
            }
        }
        Ok(())
    }
}

fn im2col(
    x: &[f64],
    c_in: usize,
    t_in: usize,
    k: usize,
    stride: usize,
    padding: usize,
    t_out: usize,
) -> Vec<f64> {
    let mut cols = vec![0.0; c_in * k * t_out];
    for c in 0..c_in {
        let xrow = &x[c * t_in..(c + 1) * t_in];
        for r in 0..k {
            let dst = &mut cols[(c * k + r) * t_out..(c * k + r + 1) * t_out];
            for (o, d) in dst.iter_mut().enumerate() {
                let pos = (o * stride + r) as isize - padding as isize;
                if pos >= 0 && (pos as usize) < t_in {
                    *d = xrow[pos as usize];
                }
            }
        }
    }
    cols
}

fn col2im(
    cols: &[f64],
    c_in: usize,
    t_in: usize,
    k: usize,
    stride: usize,
    padding: usize,
    t_out: usize,
) -> Vec<f64> {
    let mut dx = vec![0.0; c_in * t_in];
    for c in 0..c_in {
        for r in 0..k {
            let src = &cols[(c * k + r) * t_out..(c * k + r + 1) * t_out];
            for (o, &v) in src.iter().enumerate() {
                let pos = (o * stride + r) as isize - padding as isize;
                if pos >= 0 && (pos as usize) < t_in {
                    dx[c * t_in + pos as usize] += v;
                }
            }
        }
    }
    dx
}
