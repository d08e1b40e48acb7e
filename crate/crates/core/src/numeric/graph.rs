//! Tape-based reverse-mode differentiation.
//!
//! Every operation appends a node to the tape, so node indices are already a
//! topological order. `backward` walks the tape from the loss toward the
//! leaves once and accumulates into the leaves' gradient buffers.

use crate::error::{Error, Result};

use super::tensor::{Real, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Unary {
    Neg,
    Sigmoid,
    Tanh,
    Exp,
    Log,
    Square,
}

#[derive(Debug)]
enum Op<T> {
    Leaf { param: Option<usize> },
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    AddRow(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Unary(Unary, Var),
    Scale(Var, T),
    AddScalar(Var),
    Clamp { x: Var, lo: T, hi: T },
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows { x: Var, start: usize },
    Softmax { x: Var, axis: usize, mask: Option<Vec<bool>> },
    Gather { table: Var, ids: Vec<usize> },
    PoolOverTime { weights: Var, values: Var },
    L2NormalizeRows { x: Var, norms: Vec<T>, floor: T },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Vec<bool>, probs: Vec<T>, count: usize },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Recorded forward computation. One graph per forward/backward pass.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    leaf_grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> Error {
    Error::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d = *d + s);
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            leaf_grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        self.leaf_grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).unwrap_or_else(|_| {
            let mut t = Tensor::zeros(&n.shape);
            t.data_mut().copy_from_slice(&n.value);
            t
        })
    }

    /// Input leaf; gradients are kept when `tensor.requires_grad()` is set.
    pub fn input(&mut self, tensor: &Tensor<T>) -> Var {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Op::Leaf { param: None },
            tensor.requires_grad(),
        )
    }

    pub fn constant(&mut self, shape: &[usize], data: Vec<T>) -> Var {
        assert_eq!(shape.iter().product::<usize>(), data.len());
        self.push(shape.to_vec(), data, Op::Leaf { param: None }, false)
    }

    /// Trainable leaf tied to parameter slot `id`.
    pub fn param(&mut self, id: usize, tensor: &Tensor<T>) -> Var {
        self.push(
            tensor.shape().to_vec(),
            tensor.data().to_vec(),
            Op::Leaf { param: Some(id) },
            true,
        )
    }

    /// Accumulated gradient of a leaf, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.leaf_grads[v.0].as_deref()
    }

    /// `(parameter id, gradient)` for every parameter leaf that received one.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &[T])> {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Leaf { param: Some(id) } => self.leaf_grads[i].as_deref().map(|g| (id, g)),
            _ => None,
        })
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.iter_mut().for_each(|g| *g = None);
    }

    // ---------------------------------------------------------------- ops

    /// `op(a) · op(b)` for 2-D operands; `ta`/`tb` select the transposed operand.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 {
            return Err(mismatch("matmul", sa, sb));
        }
        let (m, k) = if ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
        let (k2, n) = if tb { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(mismatch("matmul", sa, sb));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, self.value(a), ta, self.value(b), tb, &mut out, false);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, ta, tb }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `x · wᵀ + bias` with `w` stored as `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let y = self.matmul_t(x, false, w, true)?;
        match bias {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    fn binary_same(&mut self, name: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(mismatch(name, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("sub", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    /// Adds a per-row vector `bias [d]` to every row of `x [.., d]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x), self.shape(bias));
        let d = *sx.last().unwrap();
        if sb.iter().product::<usize>() != d || sb.iter().filter(|&&s| s != 1).count() > 1 {
            return Err(mismatch("add_row", sx, sb));
        }
        let bv = self.value(bias);
        let out = self
            .value(x)
            .chunks(d)
            .flat_map(|row| row.iter().zip(bv).map(|(&a, &b)| a + b))
            .collect();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(sx.to_vec(), out, Op::AddRow(x, bias), rg))
    }

    pub fn unary(&mut self, op: Unary, x: Var) -> Var {
        let f: fn(T) -> T = match op {
            Unary::Neg => |v| -v,
            Unary::Sigmoid => sigmoid,
            Unary::Tanh => |v| v.tanh(),
            Unary::Exp => |v| v.exp(),
            Unary::Log => |v| v.ln(),
            Unary::Square => |v| v * v,
        };
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Unary(op, x), rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(Unary::Neg, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(Unary::Tanh, x)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.unary(Unary::Log, x)
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(Unary::Square, x)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).iter().map(|&v| v * c).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let out = self.value(x).iter().map(|&v| v + c).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::AddScalar(x), rg)
    }

    /// Elementwise clamp; the gradient is zero where the bound is active.
    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        let out = self.value(x).iter().map(|&v| v.max(lo).min(hi)).collect();
        let rg = self.rg(x);
        self.push(self.shape(x).to_vec(), out, Op::Clamp { x, lo, hi }, rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = T::from_usize(self.value(x).len()).unwrap();
        let s: T = self.value(x).iter().copied().sum();
        let rg = self.rg(x);
        self.push(vec![1], vec![s / n], Op::Mean(x), rg)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(mismatch("reshape", self.shape(x), shape));
        }
        let out = self.value(x).to_vec();
        let rg = self.rg(x);
        Ok(self.push(shape.to_vec(), out, Op::Reshape(x), rg))
    }

    /// Concatenates 2-D tensors with equal row counts along columns.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.shape(parts[0])[0];
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[0] != rows {
                return Err(mismatch("concat_cols", self.shape(parts[0]), s));
            }
        }
        let total: usize = parts.iter().map(|&p| self.shape(p)[1]).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                let c = self.shape(p)[1];
                out.extend_from_slice(&self.value(p)[r * c..(r + 1) * c]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(vec![rows, total], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Concatenates tensors along their leading axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut lead = 0;
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(mismatch("concat_rows", self.shape(parts[0]), s));
            }
            lead += s[0];
        }
        let mut out = Vec::with_capacity(lead * tail.iter().product::<usize>());
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let mut shape = vec![lead];
        shape.extend(tail);
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(shape, out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Rows `start..start+len` along the leading axis.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if start + len > s[0] || len == 0 {
            return Err(mismatch("slice_rows", &s, &[start, len]));
        }
        let inner: usize = s[1..].iter().product();
        let out = self.value(x)[start * inner..(start + len) * inner].to_vec();
        let mut shape = s;
        shape[0] = len;
        let rg = self.rg(x);
        Ok(self.push(shape, out, Op::SliceRows { x, start }, rg))
    }

    /// Softmax along `axis`, computed with max subtraction.
    ///
    /// `mask`, when given, has one entry per element of `x`; `false` entries are
    /// excluded from the normalizer and receive weight exactly zero.
    pub fn softmax(&mut self, x: Var, axis: usize, mask: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(mismatch("softmax", &shape, &[axis]));
        }
        if let Some(m) = mask {
            if m.len() != self.value(x).len() {
                return Err(mismatch("softmax mask", &shape, &[m.len()]));
            }
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let xv = self.value(x);
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * n + i) * inner + j;
                let keep = |i: usize| mask.is_none_or(|m| m[idx(i)]);
                let mut mx = T::neg_infinity();
                for i in (0..n).filter(|&i| keep(i)) {
                    mx = mx.max(xv[idx(i)]);
                }
                if mx == T::neg_infinity() {
                    return Err(Error::AllPaddingRow(o));
                }
                let mut z = T::zero();
                for i in (0..n).filter(|&i| keep(i)) {
                    let e = (xv[idx(i)] - mx).exp();
                    out[idx(i)] = e;
                    z = z + e;
                }
                for i in (0..n).filter(|&i| keep(i)) {
                    out[idx(i)] = out[idx(i)] / z;
                }
            }
        }
        let rg = self.rg(x);
        let op = Op::Softmax {
            x,
            axis,
            mask: mask.map(<[bool]>::to_vec),
        };
        Ok(self.push(shape, out, op, rg))
    }

    /// Row lookup: `table [V, d]`, `ids [N]` → `[N, d]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let s = self.shape(table).to_vec();
        if s.len() != 2 {
            return Err(mismatch("gather", &s, &[ids.len()]));
        }
        let (v, d) = (s[0], s[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(mismatch("gather", &s, &[id]));
            }
            out.extend_from_slice(&self.value(table)[id * d..(id + 1) * d]);
        }
        let rg = self.rg(table);
        Ok(self.push(vec![ids.len(), d], out, Op::Gather { table, ids: ids.to_vec() }, rg))
    }

    /// Attention pooling: `weights [T, B, r]`, `values [T, B, d]` → `[B, r·d]`
    /// with `out[b, k·d + j] = Σ_t weights[t, b, k] · values[t, b, j]`.
    pub fn pool_over_time(&mut self, weights: Var, values: Var) -> Result<Var> {
        let (sw, sv) = (self.shape(weights).to_vec(), self.shape(values).to_vec());
        if sw.len() != 3 || sv.len() != 3 || sw[0] != sv[0] || sw[1] != sv[1] {
            return Err(mismatch("pool_over_time", &sw, &sv));
        }
        let (t_len, b, r, d) = (sw[0], sw[1], sw[2], sv[2]);
        let (w, v) = (self.value(weights), self.value(values));
        let mut out = vec![T::zero(); b * r * d];
        for t in 0..t_len {
            for bi in 0..b {
                let wrow = &w[(t * b + bi) * r..(t * b + bi + 1) * r];
                let vrow = &v[(t * b + bi) * d..(t * b + bi + 1) * d];
                for (k, &wk) in wrow.iter().enumerate() {
                    if wk == T::zero() {
                        continue;
                    }
                    let dst = &mut out[bi * r * d + k * d..bi * r * d + (k + 1) * d];
                    dst.iter_mut().zip(vrow).for_each(|(o, &x)| *o = *o + wk * x);
                }
            }
        }
        let rg = self.rg(weights) || self.rg(values);
        Ok(self.push(vec![b, r * d], out, Op::PoolOverTime { weights, values }, rg))
    }

    /// Divides each row by `max(‖row‖₂, floor)`.
    pub fn l2_normalize_rows(&mut self, x: Var, floor: T) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 {
            return Err(mismatch("l2_normalize_rows", &s, &[]));
        }
        let d = s[1];
        let mut norms = Vec::with_capacity(s[0]);
        let mut out = Vec::with_capacity(s[0] * d);
        for row in self.value(x).chunks(d) {
            let n = row.iter().map(|&v| v * v).sum::<T>().sqrt().max(floor);
            norms.push(n);
            out.extend(row.iter().map(|&v| v / n));
        }
        let rg = self.rg(x);
        Ok(self.push(s, out, Op::L2NormalizeRows { x, norms, floor }, rg))
    }

    /// Mean token negative log-likelihood over the rows where `mask` is set.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() || s[0] != mask.len() {
            return Err(mismatch("cross_entropy", &s, &[targets.len(), mask.len()]));
        }
        let v = s[1];
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::EmptyMask);
        }
        let lv = self.value(logits);
        let mut probs = vec![T::zero(); lv.len()];
        let mut total = T::zero();
        for (i, row) in lv.chunks(v).enumerate() {
            if !mask[i] {
                continue;
            }
            if targets[i] >= v {
                return Err(mismatch("cross_entropy target", &s, &[targets[i]]));
            }
            let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&x| (x - mx).exp()).sum();
            let lse = mx + z.ln();
            total = total + (lse - row[targets[i]]);
            for (p, &x) in probs[i * v..(i + 1) * v].iter_mut().zip(row) {
                *p = (x - lse).exp();
            }
        }
        let loss = total / T::from_usize(count).unwrap();
        let rg = self.rg(logits);
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            mask: mask.to_vec(),
            probs,
            count,
        };
        Ok(self.push(vec![1], vec![loss], op, rg))
    }

    // ----------------------------------------------------------- backward

    /// Reverse pass from a scalar `loss`, accumulating into leaf gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        if !self.scalar(loss).is_finite() {
            return Err(Error::NonFiniteValue("loss".into()));
        }
        if !self.rg(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf { .. } => {
                    match &mut self.leaf_grads[i] {
                        Some(acc) => add_into(acc, &g),
                        slot @ None => *slot = Some(g),
                    }
                    continue;
                }
                Op::MatMul { a, b, ta, tb } => {
                    let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
                    let (m, k) = if *ta { (sa[1], sa[0]) } else { (sa[0], sa[1]) };
                    let n = if *tb { sb[0] } else { sb[1] };
                    if self.rg(*a) {
                        let mut da = vec![T::zero(); m * k];
                        let bv = &self.nodes[b.0].value;
                        if *ta {
                            T::gemm(k, n, m, bv, *tb, &g, true, &mut da, false);
                        } else {
                            T::gemm(m, n, k, &g, false, bv, !*tb, &mut da, false);
                        }
                        accumulate(&mut grads, *a, &da);
                    }
                    if self.rg(*b) {
                        let mut db = vec![T::zero(); k * n];
                        let av = &self.nodes[a.0].value;
                        if *tb {
                            T::gemm(n, m, k, &g, true, av, *ta, &mut db, false);
                        } else {
                            T::gemm(k, m, n, av, !*ta, &g, false, &mut db, false);
                        }
                        accumulate(&mut grads, *b, &db);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, &g);
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, &g);
                    }
                }
                Op::Sub(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, &g);
                    }
                    if self.rg(*b) {
                        let ng: Vec<T> = g.iter().map(|&x| -x).collect();
                        accumulate(&mut grads, *b, &ng);
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    if self.rg(*a) {
                        let da: Vec<T> = g.iter().zip(bv).map(|(&x, &y)| x * y).collect();
                        accumulate(&mut grads, *a, &da);
                    }
                    if self.rg(*b) {
                        let db: Vec<T> = g.iter().zip(av).map(|(&x, &y)| x * y).collect();
                        accumulate(&mut grads, *b, &db);
                    }
                }
                Op::AddRow(x, bias) => {
                    if self.rg(*x) {
                        accumulate(&mut grads, *x, &g);
                    }
                    if self.rg(*bias) {
                        let d = self.nodes[bias.0].value.len();
                        let mut db = vec![T::zero(); d];
                        for row in g.chunks(d) {
                            add_into(&mut db, row);
                        }
                        accumulate(&mut grads, *bias, &db);
                    }
                }
                Op::Unary(kind, x) => {
                    let y = &node.value;
                    let xv = &self.nodes[x.0].value;
                    let dx: Vec<T> = match kind {
                        Unary::Neg => g.iter().map(|&v| -v).collect(),
                        Unary::Sigmoid => g
                            .iter()
                            .zip(y)
                            .map(|(&gv, &s)| gv * s * (T::one() - s))
                            .collect(),
                        Unary::Tanh => g
                            .iter()
                            .zip(y)
                            .map(|(&gv, &t)| gv * (T::one() - t * t))
                            .collect(),
                        Unary::Exp => g.iter().zip(y).map(|(&gv, &e)| gv * e).collect(),
                        Unary::Log => g.iter().zip(xv).map(|(&gv, &v)| gv / v).collect(),
                        Unary::Square => {
                            let two = T::one() + T::one();
                            g.iter().zip(xv).map(|(&gv, &v)| gv * two * v).collect()
                        }
                    };
                    accumulate(&mut grads, *x, &dx);
                }
                Op::Scale(x, c) => {
                    let dx: Vec<T> = g.iter().map(|&v| v * *c).collect();
                    accumulate(&mut grads, *x, &dx);
                }
                Op::AddScalar(x) | Op::Reshape(x) => accumulate(&mut grads, *x, &g),
                Op::Clamp { x, lo, hi } => {
                    let xv = &self.nodes[x.0].value;
                    let dx: Vec<T> = g
                        .iter()
                        .zip(xv)
                        .map(|(&gv, &v)| if v < *lo || v > *hi { T::zero() } else { gv })
                        .collect();
                    accumulate(&mut grads, *x, &dx);
                }
                Op::Sum(x) => {
                    let n = self.nodes[x.0].value.len();
                    accumulate(&mut grads, *x, &vec![g[0]; n]);
                }
                Op::Mean(x) => {
                    let n = self.nodes[x.0].value.len();
                    let v = g[0] / T::from_usize(n).unwrap();
                    accumulate(&mut grads, *x, &vec![v; n]);
                }
                Op::ConcatCols(parts) => {
                    let rows = node.shape[0];
                    let total = node.shape[1];
                    let mut offset = 0;
                    for p in parts {
                        let c = self.nodes[p.0].shape[1];
                        if self.rg(*p) {
                            let mut dp = Vec::with_capacity(rows * c);
                            for r in 0..rows {
                                dp.extend_from_slice(&g[r * total + offset..r * total + offset + c]);
                            }
                            accumulate(&mut grads, *p, &dp);
                        }
                        offset += c;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.nodes[p.0].value.len();
                        if self.rg(*p) {
                            accumulate(&mut grads, *p, &g[offset..offset + n]);
                        }
                        offset += n;
                    }
                }
                Op::SliceRows { x, start } => {
                    let xs = &self.nodes[x.0].shape;
                    let inner: usize = xs[1..].iter().product();
                    let mut dx = vec![T::zero(); self.nodes[x.0].value.len()];
                    dx[start * inner..start * inner + g.len()].copy_from_slice(&g);
                    accumulate(&mut grads, *x, &dx);
                }
                Op::Softmax { x, axis, mask } => {
                    let shape = &node.shape;
                    let outer: usize = shape[..*axis].iter().product();
                    let n = shape[*axis];
                    let inner: usize = shape[axis + 1..].iter().product();
                    let y = &node.value;
                    let mut dx = vec![T::zero(); y.len()];
                    for o in 0..outer {
                        for j in 0..inner {
                            let idx = |i: usize| (o * n + i) * inner + j;
                            let dot: T = (0..n).map(|i| g[idx(i)] * y[idx(i)]).sum();
                            for i in 0..n {
                                if mask.as_ref().is_none_or(|m| m[idx(i)]) {
                                    dx[idx(i)] = y[idx(i)] * (g[idx(i)] - dot);
                                }
                            }
                        }
                    }
                    accumulate(&mut grads, *x, &dx);
                }
                Op::Gather { table, ids } => {
                    let d = self.nodes[table.0].shape[1];
                    let mut dt = vec![T::zero(); self.nodes[table.0].value.len()];
                    for (row, &id) in g.chunks(d).zip(ids) {
                        add_into(&mut dt[id * d..(id + 1) * d], row);
                    }
                    accumulate(&mut grads, *table, &dt);
                }
                Op::PoolOverTime { weights, values } => {
                    let sw = &self.nodes[weights.0].shape;
                    let (t_len, b, r) = (sw[0], sw[1], sw[2]);
                    let d = self.nodes[values.0].shape[2];
                    let (w, v) = (&self.nodes[weights.0].value, &self.nodes[values.0].value);
                    let mut dw = vec![T::zero(); w.len()];
                    let mut dv = vec![T::zero(); v.len()];
                    for t in 0..t_len {
                        for bi in 0..b {
                            let vrow = &v[(t * b + bi) * d..(t * b + bi + 1) * d];
                            for k in 0..r {
                                let grow = &g[bi * r * d + k * d..bi * r * d + (k + 1) * d];
                                let wk = w[(t * b + bi) * r + k];
                                dw[(t * b + bi) * r + k] =
                                    grow.iter().zip(vrow).map(|(&x, &y)| x * y).sum();
                                let dvrow = &mut dv[(t * b + bi) * d..(t * b + bi + 1) * d];
                                dvrow.iter_mut().zip(grow).for_each(|(o, &x)| *o = *o + wk * x);
                            }
                        }
                    }
                    if self.rg(*weights) {
                        accumulate(&mut grads, *weights, &dw);
                    }
                    if self.rg(*values) {
                        accumulate(&mut grads, *values, &dv);
                    }
                }
                Op::L2NormalizeRows { x, norms, floor } => {
                    let d = node.shape[1];
                    let y = &node.value;
                    let mut dx = Vec::with_capacity(y.len());
                    for (&n, (yr, gr)) in norms.iter().zip(y.chunks(d).zip(g.chunks(d))) {
                        if n > *floor {
                            let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                            dx.extend(yr.iter().zip(gr).map(|(&yv, &gv)| (gv - yv * dot) / n));
                        } else {
                            dx.extend(gr.iter().map(|&gv| gv / n));
                        }
                    }
                    accumulate(&mut grads, *x, &dx);
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    mask,
                    probs,
                    count,
                } => {
                    let v = self.nodes[logits.0].shape[1];
                    let scale = g[0] / T::from_usize(*count).unwrap();
                    let mut dl = vec![T::zero(); probs.len()];
                    for (i, (&m, &t)) in mask.iter().zip(targets).enumerate() {
                        if !m {
                            continue;
                        }
                        let row = &mut dl[i * v..(i + 1) * v];
                        for (dst, &p) in row.iter_mut().zip(&probs[i * v..(i + 1) * v]) {
                            *dst = p * scale;
                        }
                        row[t] = row[t] - scale;
                    }
                    accumulate(&mut grads, *logits, &dl);
                }
            }
        }
        Ok(())
    }
}

fn accumulate<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, g: &[T]) {
    match &mut grads[v.0] {
        Some(acc) => add_into(acc, g),
        slot @ None => *slot = Some(g.to_vec()),
    }
}
