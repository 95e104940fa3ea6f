use std::collections::HashMap;
use std::cell::Cell;
use std::sync::Arc;

use super::params::{GradSet, ParamId, ParamStore};
use super::Tensor;
use crate::error::{Error, Result};

pub const LAYER_NORM_EPS: f64 = 1e-5;

thread_local! {
    static FAULT: Cell<bool> = const { Cell::new(false) };
}

/// Deliberately corrupts the sigmoid backward pass on the calling thread.
/// Used to confirm that the gradient-check suite detects a broken derivative.
#[doc(hidden)]
pub fn inject_gradient_fault(enabled: bool) {
    FAULT.with(|f| f.set(enabled));
}

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul { a: Var, b: Var, trans_b: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Embedding { table: Var, ids: Vec<usize> },
    Conv2d { x: Var, w: Var, b: Var },
    MaxPool2d { x: Var, argmax: Vec<usize> },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Reshape(Var),
    Transpose(Var),
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<f64>, count: usize },
    Sum(Var),
}

struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Reverse-mode tape. Nodes are appended in evaluation order, so walking the
/// node list backwards is a valid reverse topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: HashMap<usize, Vec<f64>>,
    params: Vec<(ParamId, Var)>,
    bound: HashMap<ParamId, Var>,
}

/// `C = alpha · op(A) · op(B) + beta · C` with `op(A)` of shape m×k and
/// `op(B)` of shape k×n, all row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    alpha: f64,
    a: &[f64],
    trans_a: bool,
    b: &[f64],
    trans_b: bool,
    beta: f64,
    c: &mut [f64],
) {
    assert_eq!(a.len(), m * k, "gemm: lhs length");
    assert_eq!(b.len(), k * n, "gemm: rhs length");
    assert_eq!(c.len(), m * n, "gemm: output length");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c.iter_mut().for_each(|x| *x *= beta);
        return;
    }
    let (rsa, csa) = if trans_a { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if trans_b { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: lengths checked above; strides address exactly those buffers.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// (outer, axis length, inner) split of a shape around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

fn softmax_rows(x: &[f64], width: usize, causal_offset: Option<usize>) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (r, (row, dst)) in x.chunks(width).zip(out.chunks_mut(width)).enumerate() {
        let valid = causal_offset.map_or(width, |o| (r + o + 1).min(width));
        let row = &row[..valid];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (d, &v) in dst.iter_mut().zip(row) {
            *d = (v - max).exp();
            total += *d;
        }
        dst[..valid].iter_mut().for_each(|d| *d /= total);
    }
    out
}

impl Graph {
    pub fn new() -> Graph {
        Graph::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Untracked input.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Leaf whose gradient is kept after [`Graph::backward`].
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Binds a stored parameter. Binding the same id twice returns the same
    /// node. Frozen parameters become untracked leaves.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let p = store.get(id);
        self.nodes.push(Node {
            value: Arc::clone(&p.value),
            op: Op::Leaf,
            requires_grad: p.requires_grad,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        if p.requires_grad {
            self.params.push((id, v));
        }
        v
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Accumulated gradient of a tracked leaf.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads.get(&v.0).map(|g| g.as_slice())
    }

    /// Gradients of every trainable parameter bound into this graph, in
    /// binding order.
    pub fn param_grads(&self) -> GradSet {
        GradSet {
            entries: self
                .params
                .iter()
                .map(|&(id, v)| {
                    let len = self.nodes[v.0].value.len();
                    let g = self.leaf_grads.get(&v.0).cloned().unwrap_or_else(|| vec![0.0; len]);
                    (id, g)
                })
                .collect(),
        }
    }

    // ---- linear algebra ----

    /// `a (m×k) · b (k×n)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(Error::shape("matmul", sa, sb)),
        };
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, self.value(a).data(), false, self.value(b).data(), false, 0.0, &mut out);
        let rg = self.tracked(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, trans_b: false }, rg))
    }

    /// `a (m×k) · bᵀ` with `b` stored as n×k.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            ([m, k], [n, k2]) if k == k2 => (*m, *k, *n),
            _ => return Err(Error::shape("matmul_bt", sa, sb)),
        };
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, self.value(a).data(), false, self.value(b).data(), true, 0.0, &mut out);
        let rg = self.tracked(&[a, b]);
        Ok(self.push(Tensor::new(&[m, n], out)?, Op::MatMul { a, b, trans_b: true }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.value(x).dims2().ok_or_else(|| Error::shape("transpose", self.shape(x), &[0, 0]))?;
        let src = self.value(x).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.tracked(&[x]);
        Ok(self.push(Tensor::new(&[c, r], out)?, Op::Transpose(x), rg))
    }

    // ---- elementwise ----

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("add", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.tracked(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Add(a, b), rg))
    }

    /// Adds the vector `b` to every row (last axis) of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(b));
        if sb.len() != 1 || sx.is_empty() || last_dim(sx) != sb[0] {
            return Err(Error::shape("add_row", sx, sb));
        }
        let w = sb[0];
        let bias = self.value(b).data();
        let out: Vec<f64> = self.value(x).data().iter().enumerate().map(|(i, v)| v + bias[i % w]).collect();
        let shape = sx.to_vec();
        let rg = self.tracked(&[x, b]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::AddRow(x, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.tracked(&[a, b]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let t = self.value(x).map(|v| v * s);
        let rg = self.tracked(&[x]);
        self.push(t, Op::Scale(x, s), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x).map(sigmoid);
        let rg = self.tracked(&[x]);
        self.push(t, Op::Sigmoid(x), rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.value(x).map(f64::tanh);
        let rg = self.tracked(&[x]);
        self.push(t, Op::Tanh(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x).map(|v| v.max(0.0));
        let rg = self.tracked(&[x]);
        self.push(t, Op::Relu(x), rg)
    }

    // ---- lookups and layout ----

    /// Rows of `table` (V×d) selected by `ids`, giving len(ids)×d.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self
            .value(table)
            .dims2()
            .ok_or_else(|| Error::shape("embedding", self.shape(table), &[ids.len()]))?;
        if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
            return Err(Error::shape("embedding", &[v, d], &[bad]));
        }
        let src = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(src.row(i));
        }
        let rg = self.tracked(&[table]);
        Ok(self.push(
            Tensor::new(&[ids.len(), d], out)?,
            Op::Embedding { table, ids: ids.to_vec() },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = (*self.nodes[x.0].value).clone().reshaped(shape)?;
        let rg = self.tracked(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Joins tensors along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::Empty("concat of no tensors".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", &base, &[axis]));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let same_rest = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !same_rest {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_at_axis(&shape, axis);
        let mut out = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis] * inner;
                out.extend_from_slice(&self.value(*p).data()[o * len..(o + 1) * len]);
            }
        }
        let rg = self.tracked(parts);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Concat { parts: parts.to_vec(), axis }, rg))
    }

    /// `x[.., start..start+len, ..]` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::shape("slice", &s, &[axis, start, len]));
        }
        let (outer, n, inner) = split_at_axis(&s, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * n + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.tracked(&[x]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::Slice { x, axis, start }, rg))
    }

    // ---- convolution ----

    /// Stride-1, valid-padding 2-D convolution. `x`: N×C×H×W,
    /// `w`: F×C×kh×kw, `b`: F.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        let ([n, c, h, wd], [f, c2, kh, kw], [f2]) = (sx, sw, sb) else {
            return Err(Error::shape("conv2d", sx, sw));
        };
        let (n, c, h, wd, f, kh, kw) = (*n, *c, *h, *wd, *f, *kh, *kw);
        if c != *c2 || f != *f2 || kh > h || kw > wd || kh == 0 || kw == 0 {
            return Err(Error::shape("conv2d", sx, sw));
        }
        let (oh, ow) = (h - kh + 1, wd - kw + 1);
        let (xs, ws, bs) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; n * f * oh * ow];
        for ni in 0..n {
            for fi in 0..f {
                let dst = &mut out[(ni * f + fi) * oh * ow..(ni * f + fi + 1) * oh * ow];
                dst.iter_mut().for_each(|v| *v = bs[fi]);
                for ci in 0..c {
                    let xin = &xs[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd];
                    let ker = &ws[(fi * c + ci) * kh * kw..(fi * c + ci + 1) * kh * kw];
                    for i in 0..oh {
                        for j in 0..ow {
                            let mut acc = 0.0;
                            for u in 0..kh {
                                for v in 0..kw {
                                    acc += xin[(i + u) * wd + j + v] * ker[u * kw + v];
                                }
                            }
                            dst[i * ow + j] += acc;
                        }
                    }
                }
            }
        }
        let rg = self.tracked(&[x, w, b]);
        Ok(self.push(Tensor::new(&[n, f, oh, ow], out)?, Op::Conv2d { x, w, b }, rg))
    }

    /// 2×2 max pooling with stride 2 over N×C×H×W. Odd trailing rows or
    /// columns form partial windows (ceil mode), so no input is dropped.
    pub fn max_pool2d(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        let [n, c, h, w] = *s else {
            return Err(Error::shape("max_pool2d", s, &[0, 0, 0, 0]));
        };
        let (oh, ow) = (h.div_ceil(2), w.div_ceil(2));
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for u in 2 * i..(2 * i + 2).min(h) {
                        for v in 2 * j..(2 * j + 2).min(w) {
                            let idx = base + u * w + v;
                            if xs[idx] > xs[best] {
                                best = idx;
                            }
                        }
                    }
                    out.push(xs[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.tracked(&[x]);
        Ok(self.push(Tensor::new(&[n, c, oh, ow], out)?, Op::MaxPool2d { x, argmax }, rg))
    }

    // ---- normalization ----

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let out = softmax_rows(t.data(), last_dim(t.shape()), None);
        let shape = t.shape().to_vec();
        let rg = self.tracked(&[x]);
        self.push(Tensor::new(&shape, out).expect("same shape"), Op::Softmax(x), rg)
    }

    /// Row softmax of a T×S score matrix where query row `i` may only see
    /// keys `0..=i + S - T`; masked entries are exactly zero.
    pub fn causal_softmax(&mut self, x: Var) -> Result<Var> {
        let (t, s) = self
            .value(x)
            .dims2()
            .filter(|(t, s)| s >= t)
            .ok_or_else(|| Error::shape("causal_softmax", self.shape(x), &[0, 0]))?;
        let out = softmax_rows(self.value(x).data(), s, Some(s - t));
        let rg = self.tracked(&[x]);
        Ok(self.push(Tensor::new(&[t, s], out)?, Op::Softmax(x), rg))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (sx, sg, sb) = (self.shape(x), self.shape(gamma), self.shape(beta));
        let n = last_dim(sx);
        if sx.is_empty() || sg != [n] || sb != [n] {
            return Err(Error::shape("layer_norm", sx, sg));
        }
        let (xs, gs, bs) = (self.value(x).data(), self.value(gamma).data(), self.value(beta).data());
        let rows = xs.len() / n;
        let mut xhat = vec![0.0; xs.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xs.len()];
        for r in 0..rows {
            let row = &xs[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[r * n + j] = h;
                out[r * n + j] = h * gs[j] + bs[j];
            }
        }
        let shape = sx.to_vec();
        let rg = self.tracked(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::LayerNorm { x, gamma, beta, xhat, inv_std },
            rg,
        ))
    }

    // ---- reductions and losses ----

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().sum();
        let rg = self.tracked(&[x]);
        self.push(Tensor::scalar(total), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1);
        let s = self.sum(x);
        self.scale(s, 1.0 / n as f64)
    }

    /// Mean cross-entropy of logit rows (last axis = classes) against class
    /// indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let t: Vec<Option<usize>> = targets.iter().map(|&c| Some(c)).collect();
        self.cross_entropy_impl(logits, t)
    }

    /// Cross-entropy averaged over the rows where `mask` is true only.
    pub fn cross_entropy_masked(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        if mask.len() != targets.len() {
            return Err(Error::shape("cross_entropy_masked", &[targets.len()], &[mask.len()]));
        }
        let t = targets.iter().zip(mask).map(|(&c, &m)| m.then_some(c)).collect();
        self.cross_entropy_impl(logits, t)
    }

    fn cross_entropy_impl(&mut self, logits: Var, targets: Vec<Option<usize>>) -> Result<Var> {
        let s = self.shape(logits);
        let classes = last_dim(s);
        let rows = self.value(logits).len() / classes.max(1);
        if s.is_empty() || s.len() > 2 || rows != targets.len() {
            return Err(Error::shape("cross_entropy", s, &[targets.len()]));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&c| c >= classes) {
            return Err(Error::shape("cross_entropy", s, &[*bad]));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::Empty("cross-entropy batch has no unmasked rows".into()));
        }
        let z = self.value(logits).data();
        let probs = softmax_rows(z, classes, None);
        let mut loss = 0.0;
        for (r, t) in targets.iter().enumerate() {
            if let Some(c) = t {
                let row = &z[r * classes..(r + 1) * classes];
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
                loss += lse - row[*c];
            }
        }
        let rg = self.tracked(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss / count as f64),
            Op::CrossEntropy { logits, targets, probs, count },
            rg,
        ))
    }

    // ---- backward ----

    /// Back-propagates from a scalar `loss`. Gradients of tracked leaves
    /// accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::shape("backward (loss must be scalar)", lv.shape(), &[]));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                let acc = self.leaf_grads.entry(i).or_insert_with(|| vec![0.0; g.len()]);
                acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
                continue;
            }
            backprop(&self.nodes, i, &g, &mut grads);
        }
        Ok(())
    }
}

fn sink<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()]))
}

fn backprop(nodes: &[Node], i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let out = &nodes[i].value;
    let val = |v: Var| nodes[v.0].value.data();
    match &nodes[i].op {
        Op::Leaf => {}
        Op::MatMul { a, b, trans_b } => {
            let (m, n) = out.dims2().expect("matmul output is 2-D");
            let k = nodes[a.0].value.shape()[1];
            if let Some(ga) = sink(nodes, grads, *a) {
                // dA = dC · op(B)ᵀ
                gemm(m, n, k, 1.0, g, false, val(*b), !*trans_b, 1.0, ga);
            }
            if let Some(gb) = sink(nodes, grads, *b) {
                if *trans_b {
                    // B is n×k: dB = dCᵀ · A
                    gemm(n, m, k, 1.0, g, true, val(*a), false, 1.0, gb);
                } else {
                    // B is k×n: dB = Aᵀ · dC
                    gemm(k, m, n, 1.0, val(*a), true, g, false, 1.0, gb);
                }
            }
        }
        Op::Add(a, b) => {
            for v in [a, b] {
                if let Some(dst) = sink(nodes, grads, *v) {
                    dst.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
            }
        }
        Op::AddRow(x, b) => {
            if let Some(dst) = sink(nodes, grads, *x) {
                dst.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
            if let Some(dst) = sink(nodes, grads, *b) {
                let w = dst.len();
                for (j, s) in g.iter().enumerate() {
                    dst[j % w] += s;
                }
            }
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            if let Some(dst) = sink(nodes, grads, *a) {
                for j in 0..g.len() {
                    dst[j] += g[j] * bv[j];
                }
            }
            if let Some(dst) = sink(nodes, grads, *b) {
                for j in 0..g.len() {
                    dst[j] += g[j] * av[j];
                }
            }
        }
        Op::Scale(x, s) => {
            if let Some(dst) = sink(nodes, grads, *x) {
                dst.iter_mut().zip(g).for_each(|(d, v)| *d += v * s);
            }
        }
        Op::Embedding { table, ids } => {
            if let Some(dst) = sink(nodes, grads, *table) {
                let d = out.shape()[1];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dst[id * d + j] += g[r * d + j];
                    }
                }
            }
        }
        Op::Conv2d { x, w, b } => {
            let [n, c, h, wd] = *nodes[x.0].value.shape() else { unreachable!() };
            let [f, _, kh, kw] = *nodes[w.0].value.shape() else { unreachable!() };
            let (oh, ow) = (h - kh + 1, wd - kw + 1);
            let (xs, ws) = (val(*x), val(*w));
            if let Some(db) = sink(nodes, grads, *b) {
                for ni in 0..n {
                    for fi in 0..f {
                        let plane = &g[(ni * f + fi) * oh * ow..(ni * f + fi + 1) * oh * ow];
                        db[fi] += plane.iter().sum::<f64>();
                    }
                }
            }
            if let Some(dw) = sink(nodes, grads, *w) {
                for ni in 0..n {
                    for fi in 0..f {
                        let gp = &g[(ni * f + fi) * oh * ow..(ni * f + fi + 1) * oh * ow];
                        for ci in 0..c {
                            let xin = &xs[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd];
                            let ker = &mut dw[(fi * c + ci) * kh * kw..(fi * c + ci + 1) * kh * kw];
                            for u in 0..kh {
                                for v in 0..kw {
                                    let mut acc = 0.0;
                                    for i in 0..oh {
                                        for j in 0..ow {
                                            acc += gp[i * ow + j] * xin[(i + u) * wd + j + v];
                                        }
                                    }
                                    ker[u * kw + v] += acc;
                                }
                            }
                        }
                    }
                }
            }
            if let Some(dx) = sink(nodes, grads, *x) {
                for ni in 0..n {
                    for fi in 0..f {
                        let gp = &g[(ni * f + fi) * oh * ow..(ni * f + fi + 1) * oh * ow];
                        for ci in 0..c {
                            let ker = &ws[(fi * c + ci) * kh * kw..(fi * c + ci + 1) * kh * kw];
                            let dxin = &mut dx[(ni * c + ci) * h * wd..(ni * c + ci + 1) * h * wd];
                            for i in 0..oh {
                                for j in 0..ow {
                                    let gv = gp[i * ow + j];
                                    for u in 0..kh {
                                        for v in 0..kw {
                                            dxin[(i + u) * wd + j + v] += gv * ker[u * kw + v];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::MaxPool2d { x, argmax } => {
            if let Some(dst) = sink(nodes, grads, *x) {
                for (s, &idx) in g.iter().zip(argmax) {
                    dst[idx] += s;
                }
            }
        }
        Op::Sigmoid(x) => {
            let y = out.data();
            let fault = if FAULT.with(Cell::get) { 1.05 } else { 1.0 };
            if let Some(dst) = sink(nodes, grads, *x) {
                for j in 0..g.len() {
                    dst[j] += fault * g[j] * y[j] * (1.0 - y[j]);
                }
            }
        }
        Op::Tanh(x) => {
            let y = out.data();
            if let Some(dst) = sink(nodes, grads, *x) {
                for j in 0..g.len() {
                    dst[j] += g[j] * (1.0 - y[j] * y[j]);
                }
            }
        }
        Op::Relu(x) => {
            let xv = val(*x);
            if let Some(dst) = sink(nodes, grads, *x) {
                for j in 0..g.len() {
                    if xv[j] > 0.0 {
                        dst[j] += g[j];
                    }
                }
            }
        }
        Op::Softmax(x) => {
            let y = out.data();
            let w = last_dim(out.shape());
            if let Some(dst) = sink(nodes, grads, *x) {
                for r in 0..y.len() / w {
                    let (yr, gr) = (&y[r * w..(r + 1) * w], &g[r * w..(r + 1) * w]);
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..w {
                        dst[r * w + j] += yr[j] * (gr[j] - dot);
                    }
                }
            }
        }
        Op::LayerNorm { x, gamma, beta, xhat, inv_std } => {
            let n = last_dim(out.shape());
            let gs = val(*gamma);
            if let Some(dg) = sink(nodes, grads, *gamma) {
                for j in 0..g.len() {
                    dg[j % n] += g[j] * xhat[j];
                }
            }
            if let Some(db) = sink(nodes, grads, *beta) {
                for j in 0..g.len() {
                    db[j % n] += g[j];
                }
            }
            if let Some(dx) = sink(nodes, grads, *x) {
                for (r, inv) in inv_std.iter().enumerate() {
                    let mut sum_d = 0.0;
                    let mut sum_dx = 0.0;
                    for j in 0..n {
                        let d = g[r * n + j] * gs[j];
                        sum_d += d;
                        sum_dx += d * xhat[r * n + j];
                    }
                    for j in 0..n {
                        let d = g[r * n + j] * gs[j];
                        dx[r * n + j] += inv / n as f64 * (n as f64 * d - sum_d - xhat[r * n + j] * sum_dx);
                    }
                }
            }
        }
        Op::Concat { parts, axis } => {
            let (outer, _, inner) = split_at_axis(out.shape(), *axis);
            let mut offset = 0;
            let total = out.shape()[*axis] * inner;
            for p in parts {
                let len = nodes[p.0].value.shape()[*axis] * inner;
                if let Some(dst) = sink(nodes, grads, *p) {
                    for o in 0..outer {
                        let src = &g[o * total + offset..o * total + offset + len];
                        dst[o * len..(o + 1) * len].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                }
                offset += len;
            }
        }
        Op::Slice { x, axis, start } => {
            let xs = nodes[x.0].value.shape();
            let (outer, n, inner) = split_at_axis(xs, *axis);
            let len = out.shape()[*axis];
            if let Some(dst) = sink(nodes, grads, *x) {
                for o in 0..outer {
                    let base = (o * n + start) * inner;
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    dst[base..base + len * inner].iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(dst) = sink(nodes, grads, *x) {
                dst.iter_mut().zip(g).for_each(|(d, s)| *d += s);
            }
        }
        Op::Transpose(x) => {
            let (r, c) = nodes[x.0].value.dims2().expect("2-D");
            if let Some(dst) = sink(nodes, grads, *x) {
                for i in 0..r {
                    for j in 0..c {
                        dst[i * c + j] += g[j * r + i];
                    }
                }
            }
        }
        Op::CrossEntropy { logits, targets, probs, count } => {
            let classes = probs.len() / targets.len();
            let scale = g[0] / *count as f64;
            if let Some(dst) = sink(nodes, grads, *logits) {
                for (r, t) in targets.iter().enumerate() {
                    if let Some(c) = t {
                        for j in 0..classes {
                            let ind = if j == *c { 1.0 } else { 0.0 };
                            dst[r * classes + j] += scale * (probs[r * classes + j] - ind);
                        }
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(dst) = sink(nodes, grads, *x) {
                dst.iter_mut().for_each(|d| *d += g[0]);
            }
        }
    }
}
