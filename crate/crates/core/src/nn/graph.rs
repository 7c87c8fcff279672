//! Tape-based reverse-mode differentiation over the kernels in
//! [`super::kernels`].
//!
//! A [`Graph`] records every operation as it is evaluated. Parameters enter
//! the graph by value (copied from a [`ParamStore`]); the same parameter may
//! appear more than once, in which case its gradients accumulate, which is how
//! the twin encoder shares weights with the unmixing encoder.

use std::collections::hash_map::DefaultHasher;
use std::collections::HashMap;
use std::hash::{Hash, Hasher};
use std::sync::Arc;

use super::kernels::{self, ConvShape};
use super::params::{ParamId, ParamStore};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param { store: u64, id: ParamId },
    Conv { x: NodeId, w: NodeId, b: NodeId, shape: ConvShape, col: Vec<f64> },
    Relu { x: NodeId },
    Add { a: NodeId, b: NodeId },
    MaxPool { x: NodeId, argmax: Vec<usize> },
    Reshape { x: NodeId },
    Dense { x: NodeId, w: NodeId, b: NodeId, batch: usize, f_in: usize, f_out: usize },
    /// `out[b, :] = M · x[b, :]` for a constant row-major `M`.
    FixedLinear { x: NodeId, matrix: Arc<[f64]>, rows: usize, cols: usize },
    Column { x: NodeId, index: usize, width: usize },
    RowNormalize { x: NodeId, width: usize },
    /// Mean over rows of the row-wise sum of squared differences.
    SquaredError { pred: NodeId, target: Vec<f64>, width: usize },
    /// Mean over rows of `-log softmax(x)[target]`.
    SoftmaxCe { x: NodeId, targets: Vec<usize>, width: usize },
    Homoscedastic { losses: Vec<NodeId>, log_sigmas: Vec<NodeId> },
    Sum { x: NodeId },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients keyed by parameter store.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    by_store: HashMap<u64, HashMap<ParamId, Vec<f64>>>,
}

impl Gradients {
    pub fn for_store(&self, store: &ParamStore) -> Option<&HashMap<ParamId, Vec<f64>>> {
        self.by_store.get(&store.key())
    }

    pub fn get(&self, store: &ParamStore, id: ParamId) -> Option<&[f64]> {
        self.for_store(store).and_then(|m| m.get(&id)).map(Vec::as_slice)
    }

    fn accumulate(&mut self, store: u64, id: ParamId, g: &[f64]) {
        let slot = self
            .by_store
            .entry(store)
            .or_default()
            .entry(id)
            .or_insert_with(|| vec![0.0; g.len()]);
        for (s, v) in slot.iter_mut().zip(g) {
            *s += v;
        }
    }
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn check(op: &'static str, t: &Tensor) -> Result<()> {
    if t.all_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
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

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> NodeId {
        self.nodes.push(Node { op, value, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    fn node(&self, id: NodeId) -> Result<&Node> {
        self.nodes
            .get(id.0)
            .ok_or_else(|| Error::Usage(format!("node {} is not part of this graph", id.0)))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// A constant input.
    pub fn input(&mut self, t: Tensor) -> Result<NodeId> {
        check("input", &t)?;
        Ok(self.push(Op::Leaf, t, false))
    }

    /// A trainable parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let v = store.value(id).clone();
        self.push(Op::Param { store: store.key(), id }, v, true)
    }

    /// A parameter whose value is used but which receives no gradient.
    pub fn frozen_param(&mut self, store: &ParamStore, id: ParamId) -> NodeId {
        let v = store.value(id).clone();
        self.push(Op::Leaf, v, false)
    }

    pub fn conv1d(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (xs, ws) = (self.node(x)?.value.shape().to_vec(), self.node(w)?.value.shape().to_vec());
        if xs.len() != 3 || ws.len() != 3 {
            return Err(Error::Usage("conv1d expects (b,c,L) input and (c_out,c_in,k) weights".into()));
        }
        if ws[2] % 2 == 0 {
            return Err(Error::Config(format!("conv1d kernel size must be odd, got {}", ws[2])));
        }
        if ws[1] != xs[1] {
            return Err(Error::dim("conv1d channels", ws[1], xs[1]));
        }
        if self.value(b).len() != ws[0] {
            return Err(Error::dim("conv1d bias", ws[0], self.value(b).len()));
        }
        let shape = ConvShape {
            batch: xs[0],
            c_in: xs[1],
            c_out: ws[0],
            len: xs[2],
            kernel: ws[2],
        };
        let (out, col) = kernels::conv1d_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), &shape);
        let t = Tensor::new(vec![shape.batch, shape.c_out, shape.len], out)?;
        check("conv1d", &t)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Op::Conv { x, w, b, shape, col }, t, rg))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let v = self.node(x)?.value.clone();
        let shape = v.shape().to_vec();
        let data = v.into_data().into_iter().map(|a| a.max(0.0)).collect();
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(x);
        Ok(self.push(Op::Relu { x }, t, rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (va, vb) = (&self.node(a)?.value, &self.node(b)?.value);
        if va.shape() != vb.shape() {
            return Err(Error::dim("add", va.len(), vb.len()));
        }
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(va.shape().to_vec(), data)?;
        check("add", &t)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add { a, b }, t, rg))
    }

    pub fn maxpool1d(&mut self, x: NodeId, k: usize) -> Result<NodeId> {
        let s = self.node(x)?.value.shape().to_vec();
        if s.len() != 3 {
            return Err(Error::Usage("maxpool1d expects a (b,c,L) input".into()));
        }
        if k == 0 || k > s[2] {
            return Err(Error::Config(format!("maxpool window {k} invalid for length {}", s[2])));
        }
        let (out, argmax) = kernels::maxpool_forward(self.value(x).data(), s[0] * s[1], s[2], k);
        let t = Tensor::new(vec![s[0], s[1], s[2] / k], out)?;
        let rg = self.rg(x);
        Ok(self.push(Op::MaxPool { x, argmax }, t, rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let t = self.node(x)?.value.clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(Op::Reshape { x }, t, rg))
    }

    /// Flattens everything after the batch axis.
    pub fn flatten(&mut self, x: NodeId) -> Result<NodeId> {
        let s = self.node(x)?.value.shape().to_vec();
        let rest = s[1..].iter().product();
        self.reshape(x, vec![s[0], rest])
    }

    pub fn dense(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let xs = self.node(x)?.value.shape().to_vec();
        let ws = self.node(w)?.value.shape().to_vec();
        if xs.len() != 2 || ws.len() != 2 {
            return Err(Error::Usage("dense expects (b,f) input and (f_out,f_in) weights".into()));
        }
        if ws[1] != xs[1] {
            return Err(Error::dim("dense", ws[1], xs[1]));
        }
        if self.value(b).len() != ws[0] {
            return Err(Error::dim("dense bias", ws[0], self.value(b).len()));
        }
        let (batch, f_in, f_out) = (xs[0], xs[1], ws[0]);
        let out = kernels::dense_forward(self.value(x).data(), self.value(w).data(), self.value(b).data(), batch, f_in, f_out);
        let t = Tensor::new(vec![batch, f_out], out)?;
        check("dense", &t)?;
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Op::Dense { x, w, b, batch, f_in, f_out }, t, rg))
    }

    /// Applies a constant `rows × cols` matrix to every row of `x: (b, cols)`.
    pub fn fixed_linear(&mut self, x: NodeId, matrix: Arc<[f64]>, rows: usize, cols: usize) -> Result<NodeId> {
        let xs = self.node(x)?.value.shape().to_vec();
        if xs.len() != 2 || xs[1] != cols || matrix.len() != rows * cols {
            return Err(Error::dim("fixed_linear", cols, *xs.last().unwrap_or(&0)));
        }
        let mut out = vec![0.0; xs[0] * rows];
        for (z, o) in self.value(x).data().chunks_exact(cols).zip(out.chunks_exact_mut(rows)) {
            crate::spectral::mix_into(&matrix, cols, z, o);
        }
        let t = Tensor::new(vec![xs[0], rows], out)?;
        check("fixed_linear", &t)?;
        let rg = self.rg(x);
        Ok(self.push(Op::FixedLinear { x, matrix, rows, cols }, t, rg))
    }

    /// Column `index` of a `(b, width)` tensor as `(b, 1)`.
    pub fn column(&mut self, x: NodeId, index: usize) -> Result<NodeId> {
        let xs = self.node(x)?.value.shape().to_vec();
        if xs.len() != 2 || index >= xs[1] {
            return Err(Error::Usage(format!("column {index} out of range for shape {xs:?}")));
        }
        let width = xs[1];
        let data = self.value(x).data().chunks_exact(width).map(|r| r[index]).collect();
        let t = Tensor::new(vec![xs[0], 1], data)?;
        let rg = self.rg(x);
        Ok(self.push(Op::Column { x, index, width }, t, rg))
    }

    /// Scales each row of `(b, width)` to unit L2 norm; all-zero rows pass
    /// through unchanged.
    pub fn row_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let xs = self.node(x)?.value.shape().to_vec();
        if xs.len() != 2 {
            return Err(Error::Usage("row_normalize expects (b, width)".into()));
        }
        let width = xs[1];
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_exact_mut(width) {
            let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if n > 0.0 {
                row.iter_mut().for_each(|v| *v /= n);
            }
        }
        let t = Tensor::new(xs, data)?;
        let rg = self.rg(x);
        Ok(self.push(Op::RowNormalize { x, width }, t, rg))
    }

    /// Mean over rows of `||pred_row - target_row||²`.
    pub fn squared_error(&mut self, pred: NodeId, target: Vec<f64>) -> Result<NodeId> {
        let p = &self.node(pred)?.value;
        if p.len() != target.len() {
            return Err(Error::dim("squared_error", p.len(), target.len()));
        }
        let batch = p.shape()[0].max(1);
        let width = p.len() / batch;
        let s: f64 = p.data().iter().zip(&target).map(|(a, b)| (a - b) * (a - b)).sum();
        let t = Tensor::scalar(s / batch as f64);
        check("squared_error", &t)?;
        let rg = self.rg(pred);
        Ok(self.push(Op::SquaredError { pred, target, width }, t, rg))
    }

    /// Mean over rows of the negative log-softmax at each row's target.
    pub fn softmax_ce(&mut self, x: NodeId, targets: Vec<usize>) -> Result<NodeId> {
        let xs = self.node(x)?.value.shape().to_vec();
        if xs.len() != 2 || xs[0] != targets.len() {
            return Err(Error::dim("softmax_ce", xs[0], targets.len()));
        }
        let width = xs[1];
        if targets.iter().any(|&t| t >= width) {
            return Err(Error::Usage("softmax_ce target index out of range".into()));
        }
        let mut total = 0.0;
        for (row, &t) in self.value(x).data().chunks_exact(width).zip(&targets) {
            total += neg_log_softmax(row, t);
        }
        let v = Tensor::scalar(total / targets.len().max(1) as f64);
        check("softmax_ce", &v)?;
        let rg = self.rg(x);
        Ok(self.push(Op::SoftmaxCe { x, targets, width }, v, rg))
    }

    /// `Σ_i L_i / (2 σ_i²) + Σ_i log σ_i` with `σ_i = exp(log_sigma_i)`.
    pub fn homoscedastic(&mut self, losses: Vec<NodeId>, log_sigmas: Vec<NodeId>) -> Result<NodeId> {
        if losses.len() != log_sigmas.len() {
            return Err(Error::Config(format!(
                "{} task losses but {} loss weights",
                losses.len(),
                log_sigmas.len()
            )));
        }
        let l: Vec<f64> = losses.iter().map(|&n| self.value(n).data()[0]).collect();
        let s: Vec<f64> = log_sigmas.iter().map(|&n| self.value(n).data()[0]).collect();
        let t = Tensor::scalar(super::loss::homoscedastic_value(&l, &s)?);
        check("homoscedastic", &t)?;
        let rg = losses.iter().chain(&log_sigmas).any(|&n| self.rg(n));
        Ok(self.push(Op::Homoscedastic { losses, log_sigmas }, t, rg))
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId> {
        let s: f64 = self.node(x)?.value.data().iter().sum();
        let rg = self.rg(x);
        Ok(self.push(Op::Sum { x }, Tensor::scalar(s), rg))
    }

    /// Hash of every ReLU sign pattern and max-pool selection. Two evaluations
    /// with equal signatures lie in the same smooth piece of the function.
    pub fn kink_signature(&self) -> u64 {
        let mut h = DefaultHasher::new();
        for n in &self.nodes {
            match &n.op {
                Op::Relu { x } => {
                    for v in self.nodes[x.0].value.data() {
                        (*v > 0.0).hash(&mut h);
                    }
                }
                Op::MaxPool { argmax, .. } => argmax.hash(&mut h),
                _ => {}
            }
        }
        h.finish()
    }

    /// Reverse-mode sweep from a scalar node.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let root = self.node(loss).map_err(|_| Error::Usage("backward called before forward".into()))?;
        if root.value.len() != 1 {
            return Err(Error::Usage(format!("backward needs a scalar loss, got {} values", root.value.len())));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();

        fn acc(grads: &mut [Option<Vec<f64>>], id: NodeId, g: Vec<f64>) {
            match &mut grads[id.0] {
                Some(existing) => existing.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                slot @ None => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::Param { store, id } => out.accumulate(*store, *id, &g),
                Op::Conv { x, w, b, shape, col } => {
                    let need_dw = self.rg(*w) || self.rg(*b);
                    let r = kernels::conv1d_backward(&g, col, self.value(*w).data(), shape, self.rg(*x), need_dw);
                    if let Some(dx) = r.dx {
                        acc(&mut grads, *x, dx);
                    }
                    if let (Some(dw), Some(db)) = (r.dw, r.dbias) {
                        if self.rg(*w) {
                            acc(&mut grads, *w, dw);
                        }
                        if self.rg(*b) {
                            acc(&mut grads, *b, db);
                        }
                    }
                }
                Op::Relu { x } => {
                    let xv = self.value(*x).data();
                    let dx = g.iter().zip(xv).map(|(d, v)| if *v > 0.0 { *d } else { 0.0 }).collect();
                    acc(&mut grads, *x, dx);
                }
                Op::Add { a, b } => {
                    if self.rg(*a) {
                        acc(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        acc(&mut grads, *b, g);
                    }
                }
                Op::MaxPool { x, argmax } => {
                    let mut dx = vec![0.0; self.value(*x).len()];
                    for (d, &a) in g.iter().zip(argmax) {
                        dx[a] += d;
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Reshape { x } => acc(&mut grads, *x, g),
                Op::Dense { x, w, b, batch, f_in, f_out } => {
                    let need_dw = self.rg(*w) || self.rg(*b);
                    let r = kernels::dense_backward(
                        &g,
                        self.value(*x).data(),
                        self.value(*w).data(),
                        *batch,
                        *f_in,
                        *f_out,
                        self.rg(*x),
                        need_dw,
                    );
                    if let Some(dx) = r.dx {
                        acc(&mut grads, *x, dx);
                    }
                    if let (Some(dw), Some(db)) = (r.dw, r.dbias) {
                        if self.rg(*w) {
                            acc(&mut grads, *w, dw);
                        }
                        if self.rg(*b) {
                            acc(&mut grads, *b, db);
                        }
                    }
                }
                Op::FixedLinear { x, matrix, rows, cols } => {
                    // dx[b, c] = Σ_r M[r, c] · g[b, r]
                    let batch = g.len() / rows;
                    let mut dx = vec![0.0; batch * cols];
                    for bi in 0..batch {
                        let gr = &g[bi * rows..(bi + 1) * rows];
                        let dr = &mut dx[bi * cols..(bi + 1) * cols];
                        for (r, gv) in gr.iter().enumerate() {
                            let mrow = &matrix[r * cols..(r + 1) * cols];
                            for (d, m) in dr.iter_mut().zip(mrow) {
                                *d += m * gv;
                            }
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Column { x, index, width } => {
                    let mut dx = vec![0.0; g.len() * width];
                    for (bi, gv) in g.iter().enumerate() {
                        dx[bi * width + index] = *gv;
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::RowNormalize { x, width } => {
                    let xv = self.value(*x).data();
                    let yv = &node.value.data();
                    let mut dx = vec![0.0; xv.len()];
                    for r in 0..xv.len() / width {
                        let xr = &xv[r * width..(r + 1) * width];
                        let n = xr.iter().map(|v| v * v).sum::<f64>().sqrt();
                        let gr = &g[r * width..(r + 1) * width];
                        let dr = &mut dx[r * width..(r + 1) * width];
                        if n > 0.0 {
                            let yr = &yv[r * width..(r + 1) * width];
                            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for i in 0..*width {
                                dr[i] = (gr[i] - yr[i] * dot) / n;
                            }
                        } else {
                            dr.copy_from_slice(gr);
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::SquaredError { pred, target, width } => {
                    let p = self.value(*pred).data();
                    let batch = (p.len() / width).max(1) as f64;
                    let f = 2.0 * g[0] / batch;
                    let dx = p.iter().zip(target).map(|(a, b)| f * (a - b)).collect();
                    acc(&mut grads, *pred, dx);
                }
                Op::SoftmaxCe { x, targets, width } => {
                    let xv = self.value(*x).data();
                    let f = g[0] / targets.len().max(1) as f64;
                    let mut dx = vec![0.0; xv.len()];
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &xv[r * width..(r + 1) * width];
                        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
                        for i in 0..*width {
                            let p = (row[i] - m).exp() / z;
                            dx[r * width + i] = f * (p - if i == t { 1.0 } else { 0.0 });
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Homoscedastic { losses, log_sigmas } => {
                    for (&l, &s) in losses.iter().zip(log_sigmas) {
                        let lv = self.value(l).data()[0];
                        let sv = self.value(s).data()[0];
                        let inv = (-2.0 * sv).exp();
                        if self.rg(l) {
                            acc(&mut grads, l, vec![g[0] * 0.5 * inv]);
                        }
                        if self.rg(s) {
                            // d/ds [L e^{-2s} / 2 + s] = 1 - L e^{-2s}
                            acc(&mut grads, s, vec![g[0] * (1.0 - lv * inv)]);
                        }
                    }
                }
                Op::Sum { x } => {
                    let n = self.value(*x).len();
                    acc(&mut grads, *x, vec![g[0]; n]);
                }
            }
        }
        Ok(out)
    }
}

pub(crate) fn neg_log_softmax(row: &[f64], target: usize) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
    lse - row[target]
}
