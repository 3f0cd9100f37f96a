//! Tape-based reverse-mode differentiation over dense tensors.
//!
//! Every forward operation appends a node holding its output value and
//! whatever it needs for the backward pass. A tape lives for one forward and
//! backward pass; build a fresh one per training step.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::numerics::tensor::{matmul_at_into, matmul_bt_into, matmul_into, transpose_data, Tensor};
use crate::scalar::Scalar;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Epsilon inside the layer-norm square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

/// A contiguous block of rows forming one attention sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Exp(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    SoftmaxRows(Var),
    Transpose(Var),
    ConcatRows(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    GatherRows {
        x: Var,
        indices: Vec<usize>,
    },
    Sum(Var),
    Mean(Var),
    SqDist(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<Segment>,
        heads: usize,
        /// Attention weights per (segment, head), each `len × len`.
        weights: Vec<Vec<T>>,
    },
    PartnerCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
    Mse {
        pred: Var,
        target: Vec<T>,
    },
    BceWithLogits {
        logits: Var,
        target: Vec<T>,
    },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records a computation for reverse-mode differentiation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar output with respect to every node of a tape.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn leaf(&mut self, value: Arc<Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            needs_grad: requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(Arc::new(value), true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(Arc::new(value), false)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(v);
        if t.is_matrix() {
            Ok((t.shape()[0], t.shape()[1]))
        } else {
            Err(Error::shape(op, format!("expected a matrix, got {:?}", t.shape())))
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) == self.shape(b) {
            Ok(())
        } else {
            Err(Error::shape(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b))))
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m}, {k}] x [{k2}, {n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul(a, b), &[a, b]))
    }

    fn zip_with(&mut self, a: Var, b: Var, op_name: &'static str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.same_shape(a, b, op_name)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        Ok(self.push(value, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "add_row")?;
        if self.value(row).len() != n {
            return Err(Error::shape("add_row", format!("[{m}, {n}] + {:?}", self.shape(row))));
        }
        let r = self.value(row).data();
        let mut out = self.value(a).data().to_vec();
        for chunk in out.chunks_mut(n) {
            for (o, &b) in chunk.iter_mut().zip(r) {
                *o = *o + b;
            }
        }
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::AddRow(a, row), &[a, row]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push(value, Op::Scale(a, c), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(value, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(T::exp);
        self.push(value, Op::Exp(a), &[a])
    }

    /// Row-wise layer normalization of an `n×d` matrix followed by an affine
    /// map with per-feature `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.matrix_dims(x, "layer_norm")?;
        if self.value(gain).len() != d || self.value(bias).len() != d {
            return Err(Error::shape(
                "layer_norm",
                format!("width {d}, gain {:?}, bias {:?}", self.shape(gain), self.shape(bias)),
            ));
        }
        let eps = T::of(LAYER_NORM_EPS);
        let dt = T::of(d as f64);
        let xs = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let mut xhat = vec![T::zero(); n * d];
        let mut inv_std = vec![T::zero(); n];
        let mut out = vec![T::zero(); n * d];
        for i in 0..n {
            let row = &xs[i * d..(i + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dt;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dt;
            let inv = T::one() / (var + eps).sqrt();
            inv_std[i] = inv;
            for j in 0..d {
                let h = (row[j] - mean) * inv;
                xhat[i * d + j] = h;
                out[i * d + j] = g[j] * h + b[j];
            }
        }
        let value = Tensor::new(&[n, d], out)?;
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// Numerically stable row-wise softmax.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (n, m) = self.matrix_dims(x, "softmax_rows")?;
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(m) {
            softmax_in_place(row);
        }
        Ok(self.push(Tensor::new(&[n, m], out)?, Op::SoftmaxRows(x), &[x]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose()?;
        Ok(self.push(value, Op::Transpose(x), &[x]))
    }

    /// Stacks matrices (or `[1, d]` / `[d]` vectors) with equal widths.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::shape("concat_rows", "no inputs"))?;
        let width = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let t = self.value(p);
            if t.cols() != width || t.shape().len() > 2 {
                return Err(Error::shape("concat_rows", format!("width {width} vs {:?}", t.shape())));
            }
            rows += t.len() / width;
            data.extend_from_slice(t.data());
        }
        let value = Tensor::new(&[rows, width], data)?;
        Ok(self.push(value, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (n, m) = self.matrix_dims(x, "slice_rows")?;
        if start >= end || end > n {
            return Err(Error::shape("slice_rows", format!("{start}..{end} of {n} rows")));
        }
        let data = self.value(x).data()[start * m..end * m].to_vec();
        let value = Tensor::new(&[end - start, m], data)?;
        Ok(self.push(value, Op::SliceRows { x, start }, &[x]))
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let (n, m) = self.matrix_dims(x, "gather_rows")?;
        if indices.is_empty() || indices.iter().any(|&i| i >= n) {
            return Err(Error::shape("gather_rows", format!("indices out of range for {n} rows")));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(indices.len() * m);
        for &i in indices {
            data.extend_from_slice(&src[i * m..(i + 1) * m]);
        }
        let value = Tensor::new(&[indices.len(), m], data)?;
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                indices: indices.to_vec(),
            },
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().copied().sum::<T>() / T::of(t.len() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Pairwise squared Euclidean distances between the rows of an `m×q`
    /// matrix, giving an `m×m` matrix.
    pub fn sq_dist(&mut self, z: Var) -> Result<Var> {
        let (m, q) = self.matrix_dims(z, "sq_dist")?;
        let zs = self.value(z).data();
        let mut out = vec![T::zero(); m * m];
        for i in 0..m {
            for j in (i + 1)..m {
                let mut acc = T::zero();
                for c in 0..q {
                    let diff = zs[i * q + c] - zs[j * q + c];
                    acc = acc + diff * diff;
                }
                out[i * m + j] = acc;
                out[j * m + i] = acc;
            }
        }
        Ok(self.push(Tensor::new(&[m, m], out)?, Op::SqDist(z), &[z]))
    }

    /// Multi-head scaled dot-product self-attention without masking.
    ///
    /// `q`, `k`, `v` are `N×d` matrices holding several sequences stacked by
    /// rows; attention only mixes rows within the same [`Segment`]. Head `h`
    /// uses feature columns `h·d/heads .. (h+1)·d/heads`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, segments: &[Segment], heads: usize) -> Result<Var> {
        let (n, d) = self.matrix_dims(q, "attention")?;
        self.same_shape(q, k, "attention")?;
        self.same_shape(q, v, "attention")?;
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape("attention", format!("width {d} not divisible by {heads} heads")));
        }
        let covered: usize = segments.iter().map(|s| s.len).sum();
        if segments.iter().any(|s| s.len == 0 || s.start + s.len > n) || covered > n {
            return Err(Error::shape("attention", "segments out of range"));
        }
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut out = vec![T::zero(); n * d];
        let mut weights = Vec::with_capacity(segments.len() * heads);
        for seg in segments {
            let len = seg.len;
            for h in 0..heads {
                let qh = block(qd, d, seg.start, len, h * dh, dh);
                let kh = block(kd, d, seg.start, len, h * dh, dh);
                let vh = block(vd, d, seg.start, len, h * dh, dh);
                let mut scores = vec![T::zero(); len * len];
                matmul_bt_into(&qh, &kh, &mut scores, len, dh, len);
                for row in scores.chunks_mut(len) {
                    row.iter_mut().for_each(|s| *s = *s * scale);
                    softmax_in_place(row);
                }
                let mut oh = vec![T::zero(); len * dh];
                matmul_into(&scores, &vh, &mut oh, len, len, dh);
                for r in 0..len {
                    let dst = (seg.start + r) * d + h * dh;
                    out[dst..dst + dh].copy_from_slice(&oh[r * dh..(r + 1) * dh]);
                }
                weights.push(scores);
            }
        }
        let value = Tensor::new(&[n, d], out)?;
        Ok(self.push(
            value,
            Op::Attention {
                q,
                k,
                v,
                segments: segments.to_vec(),
                heads,
                weights,
            },
            &[q, k, v],
        ))
    }

    /// Mean cross-entropy where row `i` of the `M×M` logits must pick column
    /// `targets[i]` among all columns except `i` itself.
    pub fn partner_cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, m2) = self.matrix_dims(logits, "partner_cross_entropy")?;
        if m != m2 || m < 2 || targets.len() != m {
            return Err(Error::shape(
                "partner_cross_entropy",
                format!("logits {:?}, {} targets", self.shape(logits), targets.len()),
            ));
        }
        if let Some(i) = (0..m).find(|&i| targets[i] == i || targets[i] >= m) {
            return Err(Error::InvalidArgument(format!(
                "row {i} has target {} which is itself or out of range",
                targets[i]
            )));
        }
        let ls = self.value(logits).data();
        let mut probs = vec![T::zero(); m * m];
        let mut total = T::zero();
        for i in 0..m {
            let row = &ls[i * m..(i + 1) * m];
            let max = (0..m)
                .filter(|&j| j != i)
                .map(|j| row[j])
                .fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for j in (0..m).filter(|&j| j != i) {
                let e = (row[j] - max).exp();
                probs[i * m + j] = e;
                z = z + e;
            }
            for j in 0..m {
                probs[i * m + j] = probs[i * m + j] / z;
            }
            total = total + (max + z.ln() - row[targets[i]]);
        }
        let loss = total / T::of(m as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::PartnerCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    /// Mean squared error against a constant target.
    pub fn mse(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        let p = self.value(pred).data();
        if p.len() != target.len() {
            return Err(Error::shape("mse", format!("{} predictions, {} targets", p.len(), target.len())));
        }
        let loss = p
            .iter()
            .zip(target)
            .map(|(&a, &b)| (a - b) * (a - b))
            .sum::<T>()
            / T::of(p.len() as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::Mse {
                pred,
                target: target.to_vec(),
            },
            &[pred],
        ))
    }

    /// Mean binary cross-entropy of logits against 0/1 targets.
    pub fn bce_with_logits(&mut self, logits: Var, target: &[T]) -> Result<Var> {
        let z = self.value(logits).data();
        if z.len() != target.len() {
            return Err(Error::shape(
                "bce_with_logits",
                format!("{} logits, {} targets", z.len(), target.len()),
            ));
        }
        let loss = z
            .iter()
            .zip(target)
            .map(|(&z, &y)| z.max(T::zero()) - z * y + (-z.abs()).exp().ln_1p())
            .sum::<T>()
            / T::of(z.len() as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                target: target.to_vec(),
            },
            &[logits],
        ))
    }

    /// Back-propagates from a single-element output.
    pub fn backward(&self, output: Var) -> Result<Gradients<T>> {
        if self.value(output).len() != 1 {
            return Err(Error::shape("backward", format!("output shape {:?} is not scalar", self.shape(output))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![T::one()]);
        for id in (0..=output.0).rev() {
            let node = &self.nodes[id];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.len()]);
        f(slot);
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = dims(self.value(*a));
                let n = self.value(*b).shape()[1];
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| matmul_bt_into(g, bv, ga, m, n, k));
                self.accumulate(grads, *b, |gb| matmul_at_into(av, g, gb, m, k, n));
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| add_into(gb, g));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *b, |gb| gb.iter_mut().zip(g).for_each(|(o, &x)| *o = *o - x));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.accumulate(grads, *a, |ga| {
                    for ((o, &x), &y) in ga.iter_mut().zip(g).zip(bv) {
                        *o = *o + x * y;
                    }
                });
                self.accumulate(grads, *b, |gb| {
                    for ((o, &x), &y) in gb.iter_mut().zip(g).zip(av) {
                        *o = *o + x * y;
                    }
                });
            }
            Op::AddRow(a, row) => {
                let n = self.value(*row).len();
                self.accumulate(grads, *a, |ga| add_into(ga, g));
                self.accumulate(grads, *row, |gr| {
                    for chunk in g.chunks(n) {
                        add_into(gr, chunk);
                    }
                });
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, |ga| {
                    ga.iter_mut().zip(g).for_each(|(o, &x)| *o = *o + x * *c)
                });
            }
            Op::Relu(a) => {
                let av = self.value(*a).data();
                self.accumulate(grads, *a, |ga| {
                    for ((o, &x), &input) in ga.iter_mut().zip(g).zip(av) {
                        if input > T::zero() {
                            *o = *o + x;
                        }
                    }
                });
            }
            Op::Exp(a) => {
                let out = node.value.data();
                self.accumulate(grads, *a, |ga| {
                    for ((o, &x), &y) in ga.iter_mut().zip(g).zip(out) {
                        *o = *o + x * y;
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (n, d) = dims(self.value(*x));
                let gv = self.value(*gain).data();
                let dt = T::of(d as f64);
                self.accumulate(grads, *x, |gx| {
                    let mut dxhat = vec![T::zero(); d];
                    for i in 0..n {
                        let gi = &g[i * d..(i + 1) * d];
                        let hi = &xhat[i * d..(i + 1) * d];
                        let mut sum = T::zero();
                        let mut dot = T::zero();
                        for j in 0..d {
                            dxhat[j] = gi[j] * gv[j];
                            sum = sum + dxhat[j];
                            dot = dot + dxhat[j] * hi[j];
                        }
                        let c = inv_std[i] / dt;
                        for j in 0..d {
                            gx[i * d + j] = gx[i * d + j] + c * (dt * dxhat[j] - sum - hi[j] * dot);
                        }
                    }
                });
                self.accumulate(grads, *gain, |gg| {
                    for (gi, hi) in g.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            gg[j] = gg[j] + gi[j] * hi[j];
                        }
                    }
                });
                self.accumulate(grads, *bias, |gb| {
                    for gi in g.chunks(d) {
                        add_into(gb, gi);
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let m = node.value.cols();
                let y = node.value.data();
                self.accumulate(grads, *x, |gx| {
                    for ((gxr, gr), yr) in gx.chunks_mut(m).zip(g.chunks(m)).zip(y.chunks(m)) {
                        softmax_backward(gxr, gr, yr);
                    }
                });
            }
            Op::Transpose(x) => {
                let (m, n) = dims(self.value(*x));
                // output is n×m; its transpose is the gradient layout of x
                let gt = transpose_data(g, n, m);
                self.accumulate(grads, *x, |gx| add_into(gx, &gt));
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).len();
                    self.accumulate(grads, *p, |gp| add_into(gp, &g[offset..offset + len]));
                    offset += len;
                }
            }
            Op::SliceRows { x, start } => {
                let m = node.value.cols();
                let off = start * m;
                self.accumulate(grads, *x, |gx| add_into(&mut gx[off..off + g.len()], g));
            }
            Op::GatherRows { x, indices } => {
                let m = node.value.cols();
                self.accumulate(grads, *x, |gx| {
                    for (r, &i) in indices.iter().enumerate() {
                        add_into(&mut gx[i * m..(i + 1) * m], &g[r * m..(r + 1) * m]);
                    }
                });
            }
            Op::Sum(x) => {
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|o| *o = *o + g[0]));
            }
            Op::Mean(x) => {
                let c = g[0] / T::of(self.value(*x).len() as f64);
                self.accumulate(grads, *x, |gx| gx.iter_mut().for_each(|o| *o = *o + c));
            }
            Op::SqDist(z) => {
                let (m, q) = dims(self.value(*z));
                let zs = self.value(*z).data();
                let two = T::of(2.0);
                self.accumulate(grads, *z, |gz| {
                    for i in 0..m {
                        for j in 0..m {
                            if i == j {
                                continue;
                            }
                            let w = (g[i * m + j] + g[j * m + i]) * two;
                            for c in 0..q {
                                gz[i * q + c] = gz[i * q + c] + w * (zs[i * q + c] - zs[j * q + c]);
                            }
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                segments,
                heads,
                weights,
            } => self.attention_backward(g, *q, *k, *v, segments, *heads, weights, grads),
            Op::PartnerCrossEntropy { logits, targets, probs } => {
                let m = targets.len();
                let c = g[0] / T::of(m as f64);
                self.accumulate(grads, *logits, |gl| {
                    for i in 0..m {
                        for j in 0..m {
                            gl[i * m + j] = gl[i * m + j] + c * probs[i * m + j];
                        }
                        gl[i * m + targets[i]] = gl[i * m + targets[i]] - c;
                    }
                });
            }
            Op::Mse { pred, target } => {
                let p = self.value(*pred).data();
                let c = g[0] * T::of(2.0) / T::of(p.len() as f64);
                self.accumulate(grads, *pred, |gp| {
                    for ((o, &a), &b) in gp.iter_mut().zip(p).zip(target) {
                        *o = *o + c * (a - b);
                    }
                });
            }
            Op::BceWithLogits { logits, target } => {
                let z = self.value(*logits).data();
                let c = g[0] / T::of(z.len() as f64);
                self.accumulate(grads, *logits, |gz| {
                    for ((o, &zi), &y) in gz.iter_mut().zip(z).zip(target) {
                        *o = *o + c * (sigmoid(zi) - y);
                    }
                });
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[T],
        q: Var,
        k: Var,
        v: Var,
        segments: &[Segment],
        heads: usize,
        weights: &[Vec<T>],
        grads: &mut [Option<Vec<T>>],
    ) {
        let (n, d) = dims(self.value(q));
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        let mut gq = vec![T::zero(); n * d];
        let mut gk = vec![T::zero(); n * d];
        let mut gv = vec![T::zero(); n * d];
        let mut w_iter = weights.iter();
        for seg in segments {
            let len = seg.len;
            for h in 0..heads {
                let a = w_iter.next().expect("one weight block per segment and head");
                let qh = block(qd, d, seg.start, len, h * dh, dh);
                let kh = block(kd, d, seg.start, len, h * dh, dh);
                let vh = block(vd, d, seg.start, len, h * dh, dh);
                let go = block(g, d, seg.start, len, h * dh, dh);

                let mut dvh = vec![T::zero(); len * dh];
                matmul_at_into(a, &go, &mut dvh, len, len, dh);
                let mut da = vec![T::zero(); len * len];
                matmul_bt_into(&go, &vh, &mut da, len, dh, len);
                let mut ds = vec![T::zero(); len * len];
                for ((dsr, dar), ar) in ds.chunks_mut(len).zip(da.chunks(len)).zip(a.chunks(len)) {
                    softmax_backward(dsr, dar, ar);
                }
                ds.iter_mut().for_each(|x| *x = *x * scale);
                let mut dqh = vec![T::zero(); len * dh];
                matmul_into(&ds, &kh, &mut dqh, len, len, dh);
                let mut dkh = vec![T::zero(); len * dh];
                matmul_at_into(&ds, &qh, &mut dkh, len, len, dh);

                scatter_block(&mut gq, &dqh, d, seg.start, len, h * dh, dh);
                scatter_block(&mut gk, &dkh, d, seg.start, len, h * dh, dh);
                scatter_block(&mut gv, &dvh, d, seg.start, len, h * dh, dh);
            }
        }
        self.accumulate(grads, q, |o| add_into(o, &gq));
        self.accumulate(grads, k, |o| add_into(o, &gk));
        self.accumulate(grads, v, |o| add_into(o, &gv));
    }
}

fn dims<T: Scalar>(t: &Tensor<T>) -> (usize, usize) {
    (t.shape()[0], t.shape()[1])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(o, &x)| *o = *o + x);
}

pub(crate) fn sigmoid<T: Scalar>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        z = z + *x;
    }
    row.iter_mut().for_each(|x| *x = *x / z);
}

/// `dx += y ⊙ (dy − ⟨dy, y⟩)` for one softmax row.
fn softmax_backward<T: Scalar>(dx: &mut [T], dy: &[T], y: &[T]) {
    let dot = dy.iter().zip(y).map(|(&a, &b)| a * b).sum::<T>();
    for ((o, &gy), &yy) in dx.iter_mut().zip(dy).zip(y) {
        *o = *o + yy * (gy - dot);
    }
}

/// Copies the `rows×cols` block at (`r0`, `c0`) of a row-major matrix with
/// `width` columns.
fn block<T: Scalar>(data: &[T], width: usize, r0: usize, rows: usize, c0: usize, cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows * cols);
    for r in r0..r0 + rows {
        out.extend_from_slice(&data[r * width + c0..r * width + c0 + cols]);
    }
    out
}

fn scatter_block<T: Scalar>(dst: &mut [T], src: &[T], width: usize, r0: usize, rows: usize, c0: usize, cols: usize) {
    for r in 0..rows {
        let off = (r0 + r) * width + c0;
        add_into(&mut dst[off..off + cols], &src[r * cols..(r + 1) * cols]);
    }
}
