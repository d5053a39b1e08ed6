//! Reverse-mode tape.
//!
//! A [`Graph`] records every operation applied to its variables. Leaves are
//! constants (never differentiated), free variables, or bound [`Param`]s.
//! Calling [`Graph::backward`] on a scalar walks the tape in reverse and
//! returns the gradient of every leaf that requires one.
//!
//! A graph built with [`Graph::no_grad`] records nothing; it is used for
//! inference and for stop-gradient targets.

use std::borrow::Cow;
use std::collections::HashMap;

use crate::conv::ConvGeometry;
use crate::layers::{Param, ParamId};
use crate::tensor::{Real, Tensor};

/// Handle to a value on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Sqrt(Var),
    Ln { x: Var, floor: T },
    ClampMin { x: Var, floor: T },
    Sigmoid(Var),
    SoftmaxRows(Var),
    SumAll(Var),
    MeanAll(Var),
    SumRows(Var),
    Gather { x: Var, index: Vec<usize> },
    ConcatCols(Vec<Var>),
    Reshape(Var),
    Conv2d { x: Var, w: Var, b: Var, stride: (usize, usize) },
    ConvTranspose2d { x: Var, w: Var, b: Var, stride: (usize, usize) },
    BatchNorm { x: Var, gamma: Var, beta: Var, mean: Vec<T>, invstd: Vec<T>, training: bool },
    BceWithLogits { x: Var, target: Tensor<T> },
}

struct Node<'a, T: Real> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// How a batch-norm node normalizes its input.
#[derive(Clone, Copy, Debug)]
pub enum Normalization<'s, T> {
    /// Batch statistics (training mode).
    Batch { eps: T },
    /// Fixed running statistics (evaluation mode).
    Running { mean: &'s [T], var: &'s [T], eps: T },
}

pub struct Graph<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
    recording: bool,
    params: HashMap<ParamId, Var>,
}

impl<'a, T: Real> Default for Graph<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Real> Graph<'a, T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), recording: true, params: HashMap::new() }
    }

    pub fn no_grad() -> Self {
        Graph { nodes: Vec::new(), recording: false, params: HashMap::new() }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
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

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn leaf(&mut self, value: Cow<'a, Tensor<T>>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad: requires_grad && self.recording });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = self.recording && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node { value: Cow::Owned(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A value that is never differentiated.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(Cow::Owned(t), false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor<T>) -> Var {
        self.leaf(Cow::Borrowed(t), false)
    }

    /// A free differentiable leaf (used for input gradients and checks).
    pub fn variable(&mut self, t: Tensor<T>) -> Var {
        self.leaf(Cow::Owned(t), true)
    }

    /// Binds a parameter. Binding the same parameter twice yields the same variable.
    pub fn param(&mut self, p: &'a Param<T>) -> Var {
        if let Some(&v) = self.params.get(&p.id()) {
            return v;
        }
        let v = self.leaf(Cow::Borrowed(&p.value), true);
        if self.recording {
            self.params.insert(p.id(), v);
        }
        v
    }

    // ---- elementwise ---------------------------------------------------

    fn binary(&mut self, a: Var, b: Var, name: &'static str, f: impl Fn(T, T) -> T) -> (Tensor<T>, [Var; 2]) {
        let (ta, tb) = (self.value(a), self.value(b));
        assert_eq!(ta.shape(), tb.shape(), "{name}: shape mismatch");
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        (Tensor::new(ta.shape(), data).unwrap(), [a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (t, ins) = self.binary(a, b, "add", |x, y| x + y);
        self.push(t, Op::Add(a, b), &ins)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let (t, ins) = self.binary(a, b, "sub", |x, y| x - y);
        self.push(t, Op::Sub(a, b), &ins)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (t, ins) = self.binary(a, b, "mul", |x, y| x * y);
        self.push(t, Op::Mul(a, b), &ins)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a).map(|x| x * c);
        self.push(t, Op::Scale(a, c), &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -T::one())
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Var {
        let t = self.value(a).map(|x| x + c);
        self.push(t, Op::AddScalar(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(t, Op::Relu(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.exp());
        self.push(t, Op::Exp(a), &[a])
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|x| x.sqrt());
        self.push(t, Op::Sqrt(a), &[a])
    }

    /// `ln(max(x, floor))`; the gradient is zero where the floor is active.
    pub fn ln_floor(&mut self, x: Var, floor: T) -> Var {
        let t = self.value(x).map(|v| v.max(floor).ln());
        self.push(t, Op::Ln { x, floor }, &[x])
    }

    pub fn clamp_min(&mut self, x: Var, floor: T) -> Var {
        let t = self.value(x).map(|v| v.max(floor));
        self.push(t, Op::ClampMin { x, floor }, &[x])
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let t = self.value(a).map(sigmoid);
        self.push(t, Op::Sigmoid(a), &[a])
    }

    // ---- reductions and indexing --------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::SumAll(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s: T = t.data().iter().copied().sum::<T>() / T::of(t.len() as f64);
        self.push(Tensor::scalar(s), Op::MeanAll(a), &[a])
    }

    /// `[m, n] → [m]`, summing each row.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        assert_eq!(t.shape().len(), 2, "sum_rows expects a matrix");
        let m = t.shape()[0];
        let data = t.rows().map(|r| r.iter().copied().sum()).collect();
        self.push(Tensor::new(&[m], data).unwrap(), Op::SumRows(a), &[a])
    }

    /// Row-wise softmax of a matrix.
    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        assert_eq!(t.shape().len(), 2, "softmax_rows expects a matrix");
        let mut data = Vec::with_capacity(t.len());
        for row in t.rows() {
            data.extend(softmax(row));
        }
        let shape = t.shape().to_vec();
        self.push(Tensor::new(&shape, data).unwrap(), Op::SoftmaxRows(a), &[a])
    }

    /// `y[i] = x[i, index[i]]`.
    pub fn gather(&mut self, x: Var, index: &[usize]) -> Var {
        let t = self.value(x);
        assert_eq!(t.shape().len(), 2, "gather expects a matrix");
        let (m, n) = (t.shape()[0], t.shape()[1]);
        assert_eq!(index.len(), m, "gather: one index per row");
        let data = index
            .iter()
            .enumerate()
            .map(|(i, &j)| {
                assert!(j < n, "gather index {j} out of range {n}");
                t.data()[i * n + j]
            })
            .collect();
        self.push(Tensor::new(&[m], data).unwrap(), Op::Gather { x, index: index.to_vec() }, &[x])
    }

    /// Concatenates matrices with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let m = self.shape(parts[0])[0];
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let s = self.shape(p);
                assert!(s.len() == 2 && s[0] == m, "concat_cols: incompatible shape {s:?}");
                s[1]
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        self.push(Tensor::new(&[m, total], data).unwrap(), Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let t = self.value(a).clone().reshaped(shape).expect("reshape: element count mismatch");
        self.push(t, Op::Reshape(a), &[a])
    }

    // ---- linear algebra ------------------------------------------------

    /// `[m, k] · [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (self.value(a), self.value(b));
        assert!(ta.shape().len() == 2 && tb.shape().len() == 2, "matmul expects matrices");
        let (m, k) = (ta.shape()[0], ta.shape()[1]);
        let n = tb.shape()[1];
        assert_eq!(tb.shape()[0], k, "matmul: inner dimension mismatch");
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, ta.data(), false, tb.data(), false, &mut out, false);
        self.push(Tensor::new(&[m, n], out).unwrap(), Op::MatMul(a, b), &[a, b])
    }

    /// Adds `b: [n]` to every row of `x: [.., n]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (tx, tb) = (self.value(x), self.value(b));
        let n = tb.len();
        assert_eq!(*tx.shape().last().unwrap(), n, "add_bias: width mismatch");
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(tb.data()) {
                *o += bv;
            }
        }
        self.push(out, Op::AddBias(x, b), &[x, b])
    }

    /// `x: [N, C, H, W]`, `w: [O, C, KH, KW]`, `b: [O]` → `[N, O, OH, OW]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: (usize, usize)) -> Var {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (geom, n, o) = conv_geometry(tx.shape(), tw.shape(), stride);
        assert_eq!(tb.len(), o, "conv2d: bias length");
        let (oh, ow) = geom.out_hw();
        let positions = oh * ow;
        let mut cols = vec![T::zero(); geom.patch_len() * positions];
        let mut out = vec![T::zero(); n * o * positions];
        for (img, dst) in tx.data().chunks(geom.image_len()).zip(out.chunks_mut(o * positions)) {
            geom.im2col(img, &mut cols);
            T::gemm(o, geom.patch_len(), positions, tw.data(), false, &cols, false, dst, false);
            for (ch, plane) in dst.chunks_mut(positions).enumerate() {
                let bias = tb.data()[ch];
                plane.iter_mut().for_each(|v| *v += bias);
            }
        }
        let t = Tensor::new(&[n, o, oh, ow], out).unwrap();
        self.push(t, Op::Conv2d { x, w, b, stride }, &[x, w, b])
    }

    /// `x: [N, C, H, W]`, `w: [C, O, KH, KW]`, `b: [O]` →
    /// `[N, O, (H-1)·SH+KH, (W-1)·SW+KW]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Var, stride: (usize, usize)) -> Var {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(b));
        let (n, c, h, wd) = dims4(tx.shape());
        let ws = tw.shape();
        assert!(ws.len() == 4 && ws[0] == c, "conv_transpose2d: weight shape {ws:?} for {c} input channels");
        let o = ws[1];
        assert_eq!(tb.len(), o, "conv_transpose2d: bias length");
        let kernel = (ws[2], ws[3]);
        let (oh, ow) = ConvGeometry::transposed_output(h, wd, kernel, stride);
        let out_geom = ConvGeometry { channels: o, height: oh, width: ow, kernel, stride };
        let hw = h * wd;
        let mut cols = vec![T::zero(); out_geom.patch_len() * hw];
        let mut out = vec![T::zero(); n * o * oh * ow];
        for (img, dst) in tx.data().chunks(c * hw).zip(out.chunks_mut(o * oh * ow)) {
            T::gemm(out_geom.patch_len(), c, hw, tw.data(), true, img, false, &mut cols, false);
            out_geom.col2im(&cols, dst);
            for (ch, plane) in dst.chunks_mut(oh * ow).enumerate() {
                let bias = tb.data()[ch];
                plane.iter_mut().for_each(|v| *v += bias);
            }
        }
        let t = Tensor::new(&[n, o, oh, ow], out).unwrap();
        self.push(t, Op::ConvTranspose2d { x, w, b, stride }, &[x, w, b])
    }

    /// Per-channel normalization of `x: [N, C, ...]` followed by the affine
    /// map `gamma · x̂ + beta`. In batch mode the biased batch mean and
    /// variance are returned so the caller can maintain running statistics.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, mode: Normalization<'_, T>) -> (Var, Option<(Vec<T>, Vec<T>)>) {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let s = tx.shape();
        assert!(s.len() >= 2, "batch_norm expects [N, C, ...]");
        let (n, c) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        assert!(tg.len() == c && tb.len() == c, "batch_norm: affine length");
        let count = T::of((n * inner) as f64);
        let (mean, var, training) = match mode {
            Normalization::Batch { eps } => {
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for (ch, m) in mean.iter_mut().enumerate() {
                    let mut acc = T::zero();
                    for i in 0..n {
                        acc += tx.data()[(i * c + ch) * inner..(i * c + ch + 1) * inner].iter().copied().sum::<T>();
                    }
                    *m = acc / count;
                }
                for (ch, v) in var.iter_mut().enumerate() {
                    let mut acc = T::zero();
                    for i in 0..n {
                        for &xv in &tx.data()[(i * c + ch) * inner..(i * c + ch + 1) * inner] {
                            let d = xv - mean[ch];
                            acc += d * d;
                        }
                    }
                    *v = acc / count;
                }
                let invstd = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect::<Vec<_>>();
                (mean, (var, invstd), true)
            }
            Normalization::Running { mean, var, eps } => {
                assert!(mean.len() == c && var.len() == c, "batch_norm: running stat length");
                let invstd = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect::<Vec<_>>();
                (mean.to_vec(), (var.to_vec(), invstd), false)
            }
        };
        let (batch_var, invstd) = var;
        let mut out = tx.clone();
        for i in 0..n {
            for ch in 0..c {
                let (m, is, g, b) = (mean[ch], invstd[ch], tg.data()[ch], tb.data()[ch]);
                for v in &mut out.data_mut()[(i * c + ch) * inner..(i * c + ch + 1) * inner] {
                    *v = (*v - m) * is * g + b;
                }
            }
        }
        let stats = training.then(|| (mean.clone(), batch_var));
        let v = self.push(out, Op::BatchNorm { x, gamma, beta, mean, invstd, training }, &[x, gamma, beta]);
        (v, stats)
    }

    /// Elementwise binary cross-entropy between `sigmoid(x)` and a fixed
    /// target in `[0, 1]`, computed from logits without forming the sigmoid.
    pub fn bce_with_logits(&mut self, x: Var, target: Tensor<T>) -> Var {
        let tx = self.value(x);
        assert_eq!(tx.shape(), target.shape(), "bce_with_logits: shape mismatch");
        let data = tx
            .data()
            .iter()
            .zip(target.data())
            .map(|(&l, &t)| l.max(T::zero()) - l * t + (-l.abs()).exp().ln_1p())
            .collect();
        let out = Tensor::new(tx.shape(), data).unwrap();
        self.push(out, Op::BceWithLogits { x, target }, &[x])
    }

    // ---- backward ------------------------------------------------------

    /// Differentiates `loss` (any shape; seeded with ones) with respect to
    /// every leaf that requires a gradient.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), T::one()));
        }
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            if let Op::Leaf = node.op {
                grads[i] = Some(gy);
                continue;
            }
            self.propagate(&node.op, &node.value, gy, &mut grads);
        }
        Gradients { grads, params: self.params.clone() }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, op: &Op<T>, y: &Tensor<T>, gy: Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let acc = |grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>| match &mut grads[v.0] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        };
        match op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) => {
                if self.wants(*b) {
                    acc(grads, *b, gy.clone());
                }
                if self.wants(*a) {
                    acc(grads, *a, gy);
                }
            }
            Op::Sub(a, b) => {
                if self.wants(*b) {
                    acc(grads, *b, gy.map(|g| -g));
                }
                if self.wants(*a) {
                    acc(grads, *a, gy);
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    acc(grads, *a, zip_map(&gy, tb, |g, v| g * v));
                }
                if self.wants(*b) {
                    acc(grads, *b, zip_map(&gy, ta, |g, v| g * v));
                }
            }
            Op::Scale(a, c) => acc(grads, *a, gy.map(|g| g * *c)),
            Op::AddScalar(a) => acc(grads, *a, gy),
            Op::Relu(a) => {
                let g = zip_map(&gy, self.value(*a), |g, x| if x > T::zero() { g } else { T::zero() });
                acc(grads, *a, g)
            }
            Op::Exp(a) => acc(grads, *a, zip_map(&gy, y, |g, e| g * e)),
            Op::Sqrt(a) => {
                let half = T::of(0.5);
                let g = zip_map(&gy, y, |g, s| if s > T::zero() { g * half / s } else { T::zero() });
                acc(grads, *a, g)
            }
            Op::Ln { x, floor } => {
                let g = zip_map(&gy, self.value(*x), |g, v| if v > *floor { g / v } else { T::zero() });
                acc(grads, *x, g)
            }
            Op::ClampMin { x, floor } => {
                let g = zip_map(&gy, self.value(*x), |g, v| if v > *floor { g } else { T::zero() });
                acc(grads, *x, g)
            }
            Op::Sigmoid(a) => acc(grads, *a, zip_map(&gy, y, |g, s| g * s * (T::one() - s))),
            Op::SoftmaxRows(a) => {
                let n = y.shape()[1];
                let mut out = gy.clone();
                for (row, (go, yr)) in out.data_mut().chunks_mut(n).zip(y.data().chunks(n)).enumerate() {
                    let gr = &gy.data()[row * n..(row + 1) * n];
                    let dot: T = gr.iter().zip(yr).map(|(&g, &p)| g * p).sum();
                    for (o, (&g, &p)) in go.iter_mut().zip(gr.iter().zip(yr)) {
                        *o = p * (g - dot);
                    }
                }
                acc(grads, *a, out)
            }
            Op::SumAll(a) => {
                let g = gy.item();
                acc(grads, *a, Tensor::full(self.shape(*a), g))
            }
            Op::MeanAll(a) => {
                let n = self.value(*a).len();
                let g = gy.item() / T::of(n as f64);
                acc(grads, *a, Tensor::full(self.shape(*a), g))
            }
            Op::SumRows(a) => {
                let shape = self.shape(*a).to_vec();
                let n = shape[1];
                let mut out = Vec::with_capacity(shape[0] * n);
                for &g in gy.data() {
                    out.extend(std::iter::repeat_n(g, n));
                }
                acc(grads, *a, Tensor::new(&shape, out).unwrap())
            }
            Op::Gather { x, index } => {
                let shape = self.shape(*x).to_vec();
                let n = shape[1];
                let mut out = Tensor::zeros(&shape);
                for (i, (&j, &g)) in index.iter().zip(gy.data()).enumerate() {
                    out.data_mut()[i * n + j] = g;
                }
                acc(grads, *x, out)
            }
            Op::ConcatCols(parts) => {
                let total = y.shape()[1];
                let m = y.shape()[0];
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p)[1];
                    if self.wants(p) {
                        let mut out = Vec::with_capacity(m * w);
                        for i in 0..m {
                            out.extend_from_slice(&gy.data()[i * total + offset..i * total + offset + w]);
                        }
                        acc(grads, p, Tensor::new(&[m, w], out).unwrap());
                    }
                    offset += w;
                }
            }
            Op::Reshape(a) => {
                let shape = self.shape(*a).to_vec();
                acc(grads, *a, gy.reshaped(&shape).unwrap())
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    T::gemm(m, n, k, gy.data(), false, tb.data(), true, &mut da, false);
                    acc(grads, *a, Tensor::new(&[m, k], da).unwrap());
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    T::gemm(k, m, n, ta.data(), true, gy.data(), false, &mut db, false);
                    acc(grads, *b, Tensor::new(&[k, n], db).unwrap());
                }
            }
            Op::AddBias(x, b) => {
                if self.wants(*b) {
                    let n = self.value(*b).len();
                    let mut db = vec![T::zero(); n];
                    for row in gy.data().chunks(n) {
                        for (d, &g) in db.iter_mut().zip(row) {
                            *d += g;
                        }
                    }
                    acc(grads, *b, Tensor::new(&[n], db).unwrap());
                }
                if self.wants(*x) {
                    acc(grads, *x, gy);
                }
            }
            Op::Conv2d { x, w, b, stride } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (geom, _n, o) = conv_geometry(tx.shape(), tw.shape(), *stride);
                let (oh, ow) = geom.out_hw();
                let positions = oh * ow;
                let plen = geom.patch_len();
                if self.wants(*b) {
                    acc(grads, *b, channel_sums(&gy, o, positions));
                }
                let want_w = self.wants(*w);
                let want_x = self.wants(*x);
                if want_w || want_x {
                    let mut cols = vec![T::zero(); plen * positions];
                    let mut dw = vec![T::zero(); tw.len()];
                    let mut dx = if want_x { vec![T::zero(); tx.len()] } else { Vec::new() };
                    for (i, (img, gyn)) in tx.data().chunks(geom.image_len()).zip(gy.data().chunks(o * positions)).enumerate() {
                        if want_w {
                            geom.im2col(img, &mut cols);
                            T::gemm(o, positions, plen, gyn, false, &cols, true, &mut dw, true);
                        }
                        if want_x {
                            T::gemm(plen, o, positions, tw.data(), true, gyn, false, &mut cols, false);
                            let len = geom.image_len();
                            geom.col2im(&cols, &mut dx[i * len..(i + 1) * len]);
                        }
                    }
                    if want_w {
                        acc(grads, *w, Tensor::new(tw.shape(), dw).unwrap());
                    }
                    if want_x {
                        acc(grads, *x, Tensor::new(tx.shape(), dx).unwrap());
                    }
                }
            }
            Op::ConvTranspose2d { x, w, b, stride } => {
                let (tx, tw) = (self.value(*x), self.value(*w));
                let (_n, c, h, wd) = dims4(tx.shape());
                let o = tw.shape()[1];
                let kernel = (tw.shape()[2], tw.shape()[3]);
                let (oh, ow) = (y.shape()[2], y.shape()[3]);
                let out_geom = ConvGeometry { channels: o, height: oh, width: ow, kernel, stride: *stride };
                let hw = h * wd;
                let plen = out_geom.patch_len();
                if self.wants(*b) {
                    acc(grads, *b, channel_sums(&gy, o, oh * ow));
                }
                let want_w = self.wants(*w);
                let want_x = self.wants(*x);
                if want_w || want_x {
                    let mut cols = vec![T::zero(); plen * hw];
                    let mut dw = vec![T::zero(); tw.len()];
                    let mut dx = if want_x { vec![T::zero(); tx.len()] } else { Vec::new() };
                    for (i, (img, gyn)) in tx.data().chunks(c * hw).zip(gy.data().chunks(o * oh * ow)).enumerate() {
                        out_geom.im2col(gyn, &mut cols);
                        if want_x {
                            T::gemm(c, plen, hw, tw.data(), false, &cols, false, &mut dx[i * c * hw..(i + 1) * c * hw], false);
                        }
                        if want_w {
                            T::gemm(c, hw, plen, img, false, &cols, true, &mut dw, true);
                        }
                    }
                    if want_w {
                        acc(grads, *w, Tensor::new(tw.shape(), dw).unwrap());
                    }
                    if want_x {
                        acc(grads, *x, Tensor::new(tx.shape(), dx).unwrap());
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, mean, invstd, training } => {
                let (tx, tg) = (self.value(*x), self.value(*gamma));
                let s = tx.shape();
                let (n, c) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let count = T::of((n * inner) as f64);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for ch in 0..c {
                    for i in 0..n {
                        let range = (i * c + ch) * inner..(i * c + ch + 1) * inner;
                        for (&g, &xv) in gy.data()[range.clone()].iter().zip(&tx.data()[range]) {
                            dbeta[ch] += g;
                            dgamma[ch] += g * (xv - mean[ch]) * invstd[ch];
                        }
                    }
                }
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); tx.len()];
                    for ch in 0..c {
                        let scale = tg.data()[ch] * invstd[ch];
                        for i in 0..n {
                            let range = (i * c + ch) * inner..(i * c + ch + 1) * inner;
                            for ((d, &g), &xv) in dx[range.clone()].iter_mut().zip(&gy.data()[range.clone()]).zip(&tx.data()[range]) {
                                *d = if *training {
                                    let xhat = (xv - mean[ch]) * invstd[ch];
                                    scale * (g - dbeta[ch] / count - xhat * dgamma[ch] / count)
                                } else {
                                    scale * g
                                };
                            }
                        }
                    }
                    acc(grads, *x, Tensor::new(s, dx).unwrap());
                }
                if self.wants(*gamma) {
                    acc(grads, *gamma, Tensor::new(&[c], dgamma).unwrap());
                }
                if self.wants(*beta) {
                    acc(grads, *beta, Tensor::new(&[c], dbeta).unwrap());
                }
            }
            Op::BceWithLogits { x, target } => {
                let tx = self.value(*x);
                let data = gy
                    .data()
                    .iter()
                    .zip(tx.data().iter().zip(target.data()))
                    .map(|(&g, (&l, &t))| g * (sigmoid(l) - t))
                    .collect();
                acc(grads, *x, Tensor::new(tx.shape(), data).unwrap())
            }
        }
    }
}

/// Leaf gradients produced by [`Graph::backward`].
pub struct Gradients<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<ParamId, Var>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn param(&self, p: &Param<T>) -> Option<&Tensor<T>> {
        self.param_by_id(p.id())
    }

    pub fn param_by_id(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id).and_then(|&v| self.wrt(v))
    }
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Max-subtracted softmax of one row.
pub fn softmax<T: Real>(row: &[T]) -> Vec<T> {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let exps: Vec<T> = row.iter().map(|&v| (v - max).exp()).collect();
    let total: T = exps.iter().copied().sum();
    exps.into_iter().map(|e| e / total).collect()
}

fn zip_map<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape(), data).unwrap()
}

fn channel_sums<T: Real>(gy: &Tensor<T>, channels: usize, plane: usize) -> Tensor<T> {
    let mut out = vec![T::zero(); channels];
    for sample in gy.data().chunks(channels * plane) {
        for (o, p) in out.iter_mut().zip(sample.chunks(plane)) {
            *o += p.iter().copied().sum::<T>();
        }
    }
    Tensor::new(&[channels], out).unwrap()
}

fn dims4(s: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(s.len(), 4, "expected [N, C, H, W], found {s:?}");
    (s[0], s[1], s[2], s[3])
}

fn conv_geometry(xs: &[usize], ws: &[usize], stride: (usize, usize)) -> (ConvGeometry, usize, usize) {
    let (n, c, h, w) = dims4(xs);
    assert!(ws.len() == 4 && ws[1] == c, "conv2d: weight shape {ws:?} for {c} input channels");
    let geom = ConvGeometry { channels: c, height: h, width: w, kernel: (ws[2], ws[3]), stride };
    (geom, n, ws[0])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, v).unwrap()
    }

    #[test]
    fn no_grad_graph_records_no_gradients() {
        let mut g = Graph::<f64>::no_grad();
        let x = g.variable(t(&[2], &[1.0, 2.0]));
        let y = g.square(x);
        let s = g.sum(y);
        assert_eq!(g.value(s).item(), 5.0);
        assert!(g.backward(s).wrt(x).is_none());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[2], &[1.0, 2.0]));
        let c = g.constant(t(&[2], &[3.0, 4.0]));
        let y = g.mul(x, c);
        let s = g.sum(y);
        let grads = g.backward(s);
        assert_eq!(grads.wrt(x).unwrap().data(), &[3.0, 4.0]);
        assert!(grads.wrt(c).is_none());
    }

    #[test]
    fn reused_variable_accumulates() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[1], &[3.0]));
        let y = g.mul(x, x);
        let z = g.add(y, x);
        let grads = g.backward(z);
        assert_eq!(grads.wrt(x).unwrap().data(), &[7.0]);
    }

    #[test]
    fn softmax_is_shift_invariant_and_normalized() {
        let a = softmax(&[1.0f64, 2.0, 3.0]);
        let b = softmax(&[1001.0f64, 1002.0, 1003.0]);
        for (x, y) in a.iter().zip(&b) {
            assert!((x - y).abs() < 1e-15);
        }
        assert!((a.iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn bce_with_logits_matches_direct_formula() {
        let mut g = Graph::<f64>::new();
        let x = g.variable(t(&[3], &[-2.0, 0.0, 3.0]));
        let y = g.bce_with_logits(x, t(&[3], &[0.0, 0.5, 1.0]));
        for (i, &l) in [-2.0f64, 0.0, 3.0].iter().enumerate() {
            let p = 1.0 / (1.0 + (-l).exp());
            let tgt = [0.0, 0.5, 1.0][i];
            let direct = -(tgt * p.ln() + (1.0 - tgt) * (1.0 - p).ln());
            assert!((g.value(y).data()[i] - direct).abs() < 1e-12);
        }
    }
}
