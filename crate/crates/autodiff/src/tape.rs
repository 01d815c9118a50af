//! Wengert-list tape for reverse-mode differentiation.
//!
//! Every forward op appends a node holding its value and enough context to
//! push gradients back to its inputs. A fresh tape is built per training
//! step; parameters live in a [`ParamStore`] and are bound onto the tape on
//! first use.

use std::collections::HashMap;

use crate::error::{NnError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{axis_split, gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: f64 },
    MatMul { a: Var, b: Var, shared: bool },
    Transpose { a: Var },
    Sigmoid { a: Var },
    Tanh { a: Var },
    Relu { a: Var },
    Softmax { a: Var, axis: usize },
    Concat { parts: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Reshape { a: Var },
    Mean { a: Var },
    MeanAxis { a: Var, axis: usize },
    Sum { a: Var },
    LayerNorm { a: Var, normed: Vec<f64>, inv_std: Vec<f64> },
    Gather { table: Var, indices: Vec<usize> },
    MovingAverage { a: Var, axis: usize, window: usize },
    Mse { pred: Var, target: Tensor },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    bound: HashMap<ParamId, Var>,
    bound_order: Vec<(ParamId, Var)>,
}

/// `small` broadcasts over `big` when its shape is a suffix of `big`'s.
fn is_suffix(big: &[usize], small: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn stable_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(NnError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Leaf whose gradient is tracked.
    pub fn variable(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, true, "variable")
    }

    /// Leaf excluded from differentiation (inputs, masks, targets).
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(t, Op::Leaf, false, "constant")
    }

    /// Binds a stored parameter, reusing the same node for repeated lookups.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        self.nodes.push(Node {
            value: store.get(id).clone(),
            op: Op::Leaf,
            requires_grad: true,
        });
        let v = Var(self.nodes.len() - 1);
        self.bound.insert(id, v);
        self.bound_order.push((id, v));
        v
    }

    fn broadcast_pair(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if is_suffix(sa, sb) {
            Ok(())
        } else {
            Err(NnError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    /// Element-wise sum; the smaller operand broadcasts over leading axes.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = if is_suffix(self.shape(a), self.shape(b)) { (a, b) } else { (b, a) };
        self.broadcast_pair("add", a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let nb = bv.len();
        let data = av.data().iter().enumerate().map(|(i, x)| x + bv[i % nb]).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Add { a, b }, rg, "add")
    }

    /// `a − b`, with `b` broadcasting over the leading axes of `a`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.broadcast_pair("sub", a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let nb = bv.len();
        let data = av.data().iter().enumerate().map(|(i, x)| x - bv[i % nb]).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Sub { a, b }, rg, "sub")
    }

    /// Hadamard product with suffix broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = if is_suffix(self.shape(a), self.shape(b)) { (a, b) } else { (b, a) };
        self.broadcast_pair("mul", a, b)?;
        let av = self.value(a);
        let bv = self.value(b).data();
        let nb = bv.len();
        let data = av.data().iter().enumerate().map(|(i, x)| x * bv[i % nb]).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::Mul { a, b }, rg, "mul")
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let value = self.value(a).map(|x| x * factor);
        let rg = self.rg(a);
        self.push(value, Op::Scale { a, factor }, rg, "scale")
    }

    /// `[.., m, k] · [k, n]` (shared right operand) or batched
    /// `[.., m, k] · [.., k, n]` with identical leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || NnError::ShapeMismatch {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let shared = sb.len() == 2;
        if sb[sb.len() - 2] != k {
            return Err(mismatch());
        }
        if !shared && (sb.len() != sa.len() || sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(mismatch());
        }
        let n = sb[sb.len() - 1];
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![0.0; batch * m * n];
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        for bi in 0..batch {
            let bslice = if shared { bd } else { &bd[bi * k * n..(bi + 1) * k * n] };
            gemm_nn(
                &ad[bi * m * k..(bi + 1) * m * k],
                bslice,
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let value = Tensor::new(out_shape, out)?;
        let rg = self.rg(a) || self.rg(b);
        self.push(value, Op::MatMul { a, b, shared }, rg, "matmul")
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(NnError::InvalidArgument("transpose needs rank >= 2".into()));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let data = transpose_last2(self.value(a).data(), r, c);
        let mut shape = s.clone();
        let l = shape.len();
        shape.swap(l - 2, l - 1);
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(a);
        self.push(value, Op::Transpose { a }, rg, "transpose")
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(stable_sigmoid);
        let rg = self.rg(a);
        self.push(value, Op::Sigmoid { a }, rg, "sigmoid")
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(f64::tanh);
        let rg = self.rg(a);
        self.push(value, Op::Tanh { a }, rg, "tanh")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(value, Op::Relu { a }, rg, "relu")
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(a, axis, None)
    }

    /// Softmax over the last axis where `allowed` (shape = a suffix of the
    /// input's shape ending in the last axis) marks the admissible entries.
    /// Masked entries get probability exactly zero.
    pub fn masked_softmax(&mut self, a: Var, allowed: &[bool]) -> Result<Var> {
        let s = self.shape(a);
        let last = *s.last().unwrap_or(&0);
        if allowed.is_empty() || last == 0 || !allowed.len().is_multiple_of(last) || !self.value(a).len().is_multiple_of(allowed.len()) {
            return Err(NnError::ShapeMismatch {
                op: "masked_softmax",
                lhs: s.to_vec(),
                rhs: vec![allowed.len()],
            });
        }
        let axis = s.len() - 1;
        self.softmax_impl(a, axis, Some(allowed))
    }

    fn softmax_impl(&mut self, a: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(NnError::InvalidArgument(format!("softmax axis {axis} out of range")));
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let x = self.value(a).data();
        let mut y = vec![0.0; x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let ok = |l: usize| mask.is_none_or(|m| m[idx(l) % m.len()]);
                let mut mx = f64::NEG_INFINITY;
                for l in 0..len {
                    if ok(l) {
                        mx = mx.max(x[idx(l)]);
                    }
                }
                if mx == f64::NEG_INFINITY {
                    return Err(NnError::FullyMasked { row: o * inner + i });
                }
                let mut z = 0.0;
                for l in 0..len {
                    if ok(l) {
                        let e = (x[idx(l)] - mx).exp();
                        y[idx(l)] = e;
                        z += e;
                    }
                }
                for l in 0..len {
                    y[idx(l)] /= z;
                }
            }
        }
        let value = Tensor::new(s, y)?;
        let rg = self.rg(a);
        self.push(value, Op::Softmax { a, axis }, rg, "softmax")
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| NnError::InvalidArgument("concat of zero tensors".into()))?;
        let s0 = self.shape(*first).to_vec();
        if axis >= s0.len() {
            return Err(NnError::InvalidArgument(format!("concat axis {axis} out of range")));
        }
        let mut total = 0;
        for p in parts {
            let sp = self.shape(*p);
            let compatible = sp.len() == s0.len()
                && sp.iter().zip(&s0).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(NnError::ShapeMismatch {
                    op: "concat",
                    lhs: s0.clone(),
                    rhs: sp.to_vec(),
                });
            }
            total += sp[axis];
        }
        let (outer, _, inner) = axis_split(&s0, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis];
                let d = self.value(*p).data();
                data.extend_from_slice(&d[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = s0;
        shape[axis] = total;
        let value = Tensor::new(shape, data)?;
        let rg = parts.iter().any(|p| self.rg(*p));
        self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
            "concat",
        )
    }

    /// `len` entries along `axis` starting at `start`; the axis is kept.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start + len > s[axis] || len == 0 {
            return Err(NnError::InvalidArgument(format!(
                "slice [{start}, {}) on axis {axis} of {s:?}",
                start + len
            )));
        }
        let (outer, full, inner) = axis_split(&s, axis);
        let d = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * full + start) * inner;
            data.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let value = Tensor::new(shape, data)?;
        let rg = self.rg(a);
        self.push(value, Op::Slice { a, axis, start }, rg, "slice")
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(a);
        self.push(value, Op::Reshape { a }, rg, "reshape")
    }

    /// Mean of all elements as a one-element tensor.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(NnError::InvalidArgument("mean of empty tensor".into()));
        }
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(a);
        self.push(Tensor::scalar(m), Op::Mean { a }, rg, "mean")
    }

    /// Mean along `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || s.len() < 2 {
            return Err(NnError::InvalidArgument(format!("mean axis {axis} of {s:?}")));
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let d = self.value(a).data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    out[o * inner + i] += d[(o * len + l) * inner + i];
                }
            }
        }
        for v in &mut out {
            *v /= len as f64;
        }
        let mut shape = s;
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        let rg = self.rg(a);
        self.push(value, Op::MeanAxis { a, axis }, rg, "mean_axis")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum::<f64>();
        let rg = self.rg(a);
        self.push(Tensor::scalar(s), Op::Sum { a }, rg, "sum")
    }

    /// Normalizes each row along the last axis to zero mean, unit variance.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let d = *s.last().ok_or_else(|| NnError::InvalidArgument("layer_norm of scalar".into()))?;
        let x = self.value(a).data();
        let rows = x.len() / d;
        let mut normed = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        for r in 0..rows {
            let row = &x[r * d..(r + 1) * d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for (o, v) in normed[r * d..(r + 1) * d].iter_mut().zip(row) {
                *o = (v - mu) * is;
            }
        }
        let value = Tensor::new(s, normed.clone())?;
        let rg = self.rg(a);
        self.push(value, Op::LayerNorm { a, normed, inv_std }, rg, "layer_norm")
    }

    /// Row lookup `table[indices]` producing `[indices.len(), d]`.
    pub fn gather(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(NnError::InvalidArgument("gather table must be 2-d".into()));
        }
        let (rows, d) = (s[0], s[1]);
        let t = self.value(table).data();
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            if i >= rows {
                return Err(NnError::InvalidArgument(format!("gather index {i} >= {rows}")));
            }
            data.extend_from_slice(&t[i * d..(i + 1) * d]);
        }
        let value = Tensor::new(vec![indices.len(), d], data)?;
        let rg = self.rg(table);
        self.push(
            value,
            Op::Gather {
                table,
                indices: indices.to_vec(),
            },
            rg,
            "gather",
        )
    }

    /// Centered moving average of odd `window` along `axis`, with the
    /// sequence padded by replicating its first and last entries so the
    /// output keeps the input length.
    pub fn moving_average(&mut self, a: Var, axis: usize, window: usize) -> Result<Var> {
        if window == 0 || window.is_multiple_of(2) {
            return Err(NnError::InvalidArgument(format!(
                "moving-average window must be odd and positive, got {window}"
            )));
        }
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(NnError::InvalidArgument(format!("axis {axis} out of range")));
        }
        let (outer, len, inner) = axis_split(&s, axis);
        let half = (window / 2) as isize;
        let x = self.value(a).data();
        let mut out = vec![0.0; x.len()];
        let w = window as f64;
        for o in 0..outer {
            for t in 0..len {
                for i in 0..inner {
                    // Averaging offsets from the centre value makes a constant
                    // window come back exactly.
                    let centre = x[(o * len + t) * inner + i];
                    let mut acc = 0.0;
                    for j in -half..=half {
                        let src = (t as isize + j).clamp(0, len as isize - 1) as usize;
                        acc += x[(o * len + src) * inner + i] - centre;
                    }
                    out[(o * len + t) * inner + i] = centre + acc / w;
                }
            }
        }
        let value = Tensor::new(s, out)?;
        let rg = self.rg(a);
        self.push(value, Op::MovingAverage { a, axis, window }, rg, "moving_average")
    }

    /// Mean squared error against a constant target.
    pub fn mse_loss(&mut self, pred: Var, target: &Tensor) -> Result<Var> {
        let p = self.value(pred);
        if p.shape() != target.shape() || p.is_empty() {
            return Err(NnError::ShapeMismatch {
                op: "mse_loss",
                lhs: p.shape().to_vec(),
                rhs: target.shape().to_vec(),
            });
        }
        let n = p.len() as f64;
        let l = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>()
            / n;
        let rg = self.rg(pred);
        self.push(
            Tensor::scalar(l),
            Op::Mse {
                pred,
                target: target.clone(),
            },
            rg,
            "mse_loss",
        )
    }

    /// Batch-mean negative log-likelihood of `labels` under
    /// `softmax(logits)`, computed through a fused log-softmax.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != labels.len() || s[0] == 0 {
            return Err(NnError::ShapeMismatch {
                op: "cross_entropy",
                lhs: s,
                rhs: vec![labels.len()],
            });
        }
        let (b, c) = (s[0], s[1]);
        if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
            return Err(NnError::InvalidArgument(format!("label {bad} outside 0..{c}")));
        }
        let x = self.value(logits).data();
        let mut probs = vec![0.0; x.len()];
        let mut total = 0.0;
        for r in 0..b {
            let row = &x[r * c..(r + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + z.ln();
            total += lse - row[labels[r]];
            for (p, v) in probs[r * c..(r + 1) * c].iter_mut().zip(row) {
                *p = (v - lse).exp();
            }
        }
        let rg = self.rg(logits);
        self.push(
            Tensor::scalar(total / b as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
            "cross_entropy",
        )
    }

    /// Runs the reverse sweep from a one-element `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(NnError::InvalidArgument("backward needs a scalar loss".into()));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), 1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].take() else { continue };
            if self.nodes[idx].requires_grad {
                self.backprop_node(idx, &g);
            }
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn acc(&mut self, v: Var, f: impl FnOnce(&mut [f64], &[Node])) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let slot = &mut self.grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.nodes[v.0].value.shape()));
        }
        f(slot.as_mut().unwrap().data_mut(), &self.nodes);
    }

    fn backprop_node(&mut self, idx: usize, g: &Tensor) {
        let gd = g.data();
        // The op is moved out temporarily so `self` can be borrowed mutably.
        let op = std::mem::replace(&mut self.nodes[idx].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                self.acc(*a, |ga, _| ga.iter_mut().zip(gd).for_each(|(x, y)| *x += y));
                self.acc(*b, |gb, _| {
                    let nb = gb.len();
                    gd.iter().enumerate().for_each(|(i, y)| gb[i % nb] += y)
                });
            }
            Op::Sub { a, b } => {
                self.acc(*a, |ga, _| ga.iter_mut().zip(gd).for_each(|(x, y)| *x += y));
                self.acc(*b, |gb, _| {
                    let nb = gb.len();
                    gd.iter().enumerate().for_each(|(i, y)| gb[i % nb] -= y)
                });
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                self.acc(a, |ga, nodes| {
                    let bv = nodes[b.0].value.data();
                    let nb = bv.len();
                    ga.iter_mut().enumerate().for_each(|(i, x)| *x += gd[i] * bv[i % nb])
                });
                self.acc(b, |gb, nodes| {
                    let av = nodes[a.0].value.data();
                    let nb = gb.len();
                    gd.iter().enumerate().for_each(|(i, y)| gb[i % nb] += y * av[i])
                });
            }
            Op::Scale { a, factor } => {
                let f = *factor;
                self.acc(*a, |ga, _| ga.iter_mut().zip(gd).for_each(|(x, y)| *x += y * f));
            }
            Op::MatMul { a, b, shared } => {
                let (a, b, shared) = (*a, *b, *shared);
                let sa = self.nodes[a.0].value.shape().to_vec();
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let sb = self.nodes[b.0].value.shape();
                let n = sb[sb.len() - 1];
                let batch: usize = sa[..sa.len() - 2].iter().product();
                self.acc(a, |ga, nodes| {
                    let bd = nodes[b.0].value.data();
                    for bi in 0..batch {
                        let bs = if shared { bd } else { &bd[bi * k * n..(bi + 1) * k * n] };
                        gemm_nt(
                            &gd[bi * m * n..(bi + 1) * m * n],
                            bs,
                            &mut ga[bi * m * k..(bi + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                });
                self.acc(b, |gb, nodes| {
                    let ad = nodes[a.0].value.data();
                    for bi in 0..batch {
                        let gbs = if shared { &mut gb[..] } else { &mut gb[bi * k * n..(bi + 1) * k * n] };
                        gemm_tn(
                            &ad[bi * m * k..(bi + 1) * m * k],
                            &gd[bi * m * n..(bi + 1) * m * n],
                            gbs,
                            m,
                            k,
                            n,
                        );
                    }
                });
            }
            Op::Transpose { a } => {
                let s = g.shape();
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                let back = transpose_last2(gd, r, c);
                self.acc(*a, |ga, _| ga.iter_mut().zip(&back).for_each(|(x, y)| *x += y));
            }
            Op::Sigmoid { a } => {
                let y = self.nodes[idx].value.data().to_vec();
                self.acc(*a, |ga, _| {
                    for i in 0..ga.len() {
                        ga[i] += gd[i] * y[i] * (1.0 - y[i]);
                    }
                });
            }
            Op::Tanh { a } => {
                let y = self.nodes[idx].value.data().to_vec();
                self.acc(*a, |ga, _| {
                    for i in 0..ga.len() {
                        ga[i] += gd[i] * (1.0 - y[i] * y[i]);
                    }
                });
            }
            Op::Relu { a } => {
                let a = *a;
                self.acc(a, |ga, nodes| {
                    let x = nodes[a.0].value.data();
                    for i in 0..ga.len() {
                        if x[i] > 0.0 {
                            ga[i] += gd[i];
                        }
                    }
                });
            }
            Op::Softmax { a, axis } => {
                let y = self.nodes[idx].value.data().to_vec();
                let (outer, len, inner) = axis_split(g.shape(), *axis);
                self.acc(*a, |ga, _| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |l: usize| (o * len + l) * inner + i;
                            let dot: f64 = (0..len).map(|l| y[at(l)] * gd[at(l)]).sum();
                            for l in 0..len {
                                ga[at(l)] += y[at(l)] * (gd[at(l)] - dot);
                            }
                        }
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(g.shape(), *axis);
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.shape()[*axis];
                    self.acc(*p, |gp, _| {
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * len * inner;
                            for j in 0..len * inner {
                                gp[dst + j] += gd[src + j];
                            }
                        }
                    });
                    offset += len;
                }
            }
            Op::Slice { a, axis, start } => {
                let (a, axis, start) = (*a, *axis, *start);
                let full = self.nodes[a.0].value.shape()[axis];
                let (outer, len, inner) = axis_split(g.shape(), axis);
                self.acc(a, |ga, _| {
                    for o in 0..outer {
                        let dst = (o * full + start) * inner;
                        let src = o * len * inner;
                        for j in 0..len * inner {
                            ga[dst + j] += gd[src + j];
                        }
                    }
                });
            }
            Op::Reshape { a } => {
                self.acc(*a, |ga, _| ga.iter_mut().zip(gd).for_each(|(x, y)| *x += y));
            }
            Op::Mean { a } => {
                let a = *a;
                let n = self.nodes[a.0].value.len() as f64;
                self.acc(a, |ga, _| ga.iter_mut().for_each(|x| *x += gd[0] / n));
            }
            Op::MeanAxis { a, axis } => {
                let (a, axis) = (*a, *axis);
                let (outer, len, inner) = axis_split(self.nodes[a.0].value.shape(), axis);
                self.acc(a, |ga, _| {
                    for o in 0..outer {
                        for l in 0..len {
                            for i in 0..inner {
                                ga[(o * len + l) * inner + i] += gd[o * inner + i] / len as f64;
                            }
                        }
                    }
                });
            }
            Op::Sum { a } => {
                self.acc(*a, |ga, _| ga.iter_mut().for_each(|x| *x += gd[0]));
            }
            Op::LayerNorm { a, normed, inv_std } => {
                let d = *g.shape().last().unwrap();
                self.acc(*a, |ga, _| {
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = &gd[r * d..(r + 1) * d];
                        let yr = &normed[r * d..(r + 1) * d];
                        let mg = gr.iter().sum::<f64>() / d as f64;
                        let mgy = gr.iter().zip(yr).map(|(x, y)| x * y).sum::<f64>() / d as f64;
                        for j in 0..d {
                            ga[r * d + j] += is * (gr[j] - mg - yr[j] * mgy);
                        }
                    }
                });
            }
            Op::Gather { table, indices } => {
                let d = g.shape()[1];
                self.acc(*table, |gt, _| {
                    for (r, &i) in indices.iter().enumerate() {
                        for j in 0..d {
                            gt[i * d + j] += gd[r * d + j];
                        }
                    }
                });
            }
            Op::MovingAverage { a, axis, window } => {
                let (outer, len, inner) = axis_split(g.shape(), *axis);
                let half = (*window / 2) as isize;
                let w = *window as f64;
                self.acc(*a, |ga, _| {
                    for o in 0..outer {
                        for t in 0..len {
                            for i in 0..inner {
                                let gv = gd[(o * len + t) * inner + i] / w;
                                for j in -half..=half {
                                    let src = (t as isize + j).clamp(0, len as isize - 1) as usize;
                                    ga[(o * len + src) * inner + i] += gv;
                                }
                            }
                        }
                    }
                });
            }
            Op::Mse { pred, target } => {
                let pred = *pred;
                let n = target.len() as f64;
                self.acc(pred, |gp, nodes| {
                    let p = nodes[pred.0].value.data();
                    for i in 0..gp.len() {
                        gp[i] += gd[0] * 2.0 * (p[i] - target.data()[i]) / n;
                    }
                });
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let b = labels.len();
                let c = probs.len() / b;
                self.acc(*logits, |gl, _| {
                    for r in 0..b {
                        for j in 0..c {
                            let onehot = if j == labels[r] { 1.0 } else { 0.0 };
                            gl[r * c + j] += gd[0] * (probs[r * c + j] - onehot) / b as f64;
                        }
                    }
                });
            }
        }
        self.nodes[idx].op = op;
    }

    /// Gradients of every bound parameter, zero-filled when a parameter did
    /// not influence the loss.
    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        self.bound_order
            .iter()
            .map(|&(id, v)| {
                let g = self
                    .grad(v)
                    .cloned()
                    .unwrap_or_else(|| Tensor::zeros(self.value(v).shape()));
                (id, g)
            })
            .collect()
    }
}

fn transpose_last2(d: &[f64], r: usize, c: usize) -> Vec<f64> {
    let batch = d.len() / (r * c).max(1);
    let mut out = vec![0.0; d.len()];
    for b in 0..batch {
        let base = b * r * c;
        for i in 0..r {
            for j in 0..c {
                out[base + j * r + i] = d[base + i * c + j];
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn activations_fixed_points() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::scalar(0.0)).unwrap();
        let s = tape.sigmoid(z).unwrap();
        let th = tape.tanh(z).unwrap();
        assert_eq!(tape.value(s).item(), 0.5);
        assert_eq!(tape.value(th).item(), 0.0);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::full(&[2, 4], 3.7)).unwrap();
        let y = tape.softmax(x, 1).unwrap();
        assert!(tape.value(y).data().iter().all(|&p| (p - 0.25).abs() < 1e-15));
    }

    #[test]
    fn fully_masked_row_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::zeros(&[2, 2])).unwrap();
        let err = tape.masked_softmax(x, &[true, true, false, false]).unwrap_err();
        assert!(matches!(err, NnError::FullyMasked { row: 1 }));
    }

    #[test]
    fn masked_entries_get_exact_zero() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[1, 3], &[5.0, 1.0, 2.0])).unwrap();
        let y = tape.masked_softmax(x, &[false, true, true]).unwrap();
        let v = tape.value(y).data();
        assert_eq!(v[0], 0.0);
        assert!((v[1] + v[2] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn matmul_shape_mismatch_is_reported() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros(&[2, 3])).unwrap();
        assert!(matches!(tape.matmul(a, b), Err(NnError::ShapeMismatch { .. })));
    }

    #[test]
    fn non_finite_forward_trips() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::scalar(f64::MAX)).unwrap();
        assert!(matches!(tape.scale(a, 10.0), Err(NnError::NonFinite { .. })));
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln3() {
        let mut tape = Tape::new();
        let x = tape.variable(Tensor::zeros(&[4, 3])).unwrap();
        let l = tape.cross_entropy(x, &[0, 1, 2, 1]).unwrap();
        assert!((tape.value(l).item() - 3f64.ln()).abs() < 1e-15);
        assert!(tape.cross_entropy(x, &[0, 1, 3, 1]).is_err());
    }

    #[test]
    fn mse_of_identical_inputs_is_zero() {
        let mut tape = Tape::new();
        let target = t(&[3], &[1.0, -2.0, 0.5]);
        let p = tape.variable(target.clone()).unwrap();
        let l = tape.mse_loss(p, &target).unwrap();
        assert_eq!(tape.value(l).item(), 0.0);
    }

    #[test]
    fn moving_average_replicates_edges() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[5], &[0.0, 0.0, 3.0, 0.0, 0.0])).unwrap();
        let m = tape.moving_average(x, 0, 3).unwrap();
        assert_eq!(tape.value(m).data(), &[0.0, 1.0, 1.0, 1.0, 0.0]);
        assert!(tape.moving_average(x, 0, 4).is_err());
    }

    #[test]
    fn moving_average_of_constant_is_exact() {
        let mut tape = Tape::new();
        for c in [0.1, 1.0 / 3.0, -7.3e5, 1e-300] {
            let x = tape.constant(Tensor::full(&[9], c)).unwrap();
            let m = tape.moving_average(x, 0, 3).unwrap();
            assert!(tape.value(m).data().iter().all(|&v| v == c), "{c}");
        }
    }

    #[test]
    fn shared_param_binding_accumulates() {
        let mut store = ParamStore::new();
        let w = store.add("w", Tensor::scalar(3.0));
        let mut tape = Tape::new();
        let a = tape.param(&store, w);
        let b = tape.param(&store, w);
        assert_eq!(a, b);
        let p = tape.mul(a, b).unwrap();
        tape.backward(p).unwrap();
        let grads = tape.param_grads();
        assert_eq!(grads[0].1.item(), 6.0);
    }
}
