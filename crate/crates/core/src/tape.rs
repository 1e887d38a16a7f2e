//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every op appends a node holding its output value and whatever it needs for
//! the backward pass. `backward` walks the nodes in reverse exactly once.
//! Node gradients are only propagated along nodes that depend on a leaf
//! created with `requires_grad = true`.
//!
//! Shape rules:
//! - `matmul(a, b)`: `a` is `[.., k]`, `b` is `[k, n]`; result `[.., n]`.
//! - `add`/`sub`/`mul`: numpy-style broadcasting.
//! - `softmax`, `masked_softmax`: over the last axis.
//! - `concat`, `slice`, `sum_axis`, `max_axis`: along an explicit axis.
//! - `embedding(table [V, d], ids)`: `[ids.len(), d]`.
//! - `cross_entropy(logits [N, C], targets, weights)`: weighted mean, scalar.
//! - `bce_with_logits(logits, targets)`: mean over all elements, scalar.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Index {
    Same,
    Tile(usize),
    Map(Vec<usize>),
}

impl Index {
    #[inline(always)]
    fn at(&self, i: usize) -> usize {
        match self {
            Index::Same => i,
            Index::Tile(n) => i % n,
            Index::Map(m) => m[i],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Binary {
        kind: BinaryKind,
        a: Var,
        b: Var,
        ia: Index,
        ib: Index,
    },
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Softmax(Var),
    MaskedSoftmax(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Reshape(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    SelectRows {
        mask: Vec<bool>,
        a: Var,
        b: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        weights: Vec<f64>,
        probs: Vec<f64>,
        total_weight: f64,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    SumAxis {
        x: Var,
        axis: usize,
    },
    MaxAxis {
        x: Var,
        axis: usize,
        argmax: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation. One tape per forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
}

/// Gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`, zero-filled when `v` was not reached.
    pub fn get(&self, v: Var) -> Tensor {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::new(shape, g.clone()).expect("gradient shape"),
            None => Tensor::zeros(shape),
        }
    }

    /// Moves the gradient for `v` out, zero-filled when unreached.
    pub fn take(&mut self, v: Var) -> Tensor {
        let shape = self.shapes[v.0].clone();
        match self.grads[v.0].take() {
            Some(g) => Tensor::new(&shape, g).expect("gradient shape"),
            None => Tensor::zeros(&shape),
        }
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = numel(&shape[..axis]);
    let inner = numel(&shape[axis + 1..]);
    (outer, shape[axis], inner)
}

/// Output shape and per-operand index maps for a broadcast binary op.
fn broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<(Vec<usize>, Index, Index)> {
    if a == b {
        return Ok((a.to_vec(), Index::Same, Index::Same));
    }
    let rank = a.len().max(b.len());
    let pad = |s: &[usize]| -> Vec<usize> {
        let mut v = vec![1; rank - s.len()];
        v.extend_from_slice(s);
        v
    };
    let (pa, pb) = (pad(a), pad(b));
    let mut out = Vec::with_capacity(rank);
    for (&x, &y) in pa.iter().zip(&pb) {
        if x == y || y == 1 {
            out.push(x);
        } else if x == 1 {
            out.push(y);
        } else {
            return Err(Error::Shape {
                op,
                lhs: a.to_vec(),
                rhs: b.to_vec(),
            });
        }
    }
    let index_for = |p: &[usize]| -> Index {
        if p == out.as_slice() {
            return Index::Same;
        }
        // Suffix operand repeated over leading axes.
        let first_full = p.iter().position(|&d| d != 1).unwrap_or(rank);
        if p[first_full..] == out[first_full..] {
            return Index::Tile(numel(p).max(1));
        }
        let mut strides = vec![0usize; rank];
        let mut s = 1;
        for ax in (0..rank).rev() {
            strides[ax] = if p[ax] == 1 { 0 } else { s };
            s *= p[ax];
        }
        let total = numel(&out);
        let mut map = Vec::with_capacity(total);
        let mut idx = vec![0usize; rank];
        for _ in 0..total {
            map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if idx[ax] < out[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        Index::Map(map)
    };
    let ia = index_for(&pa);
    let ib = index_for(&pb);
    Ok((out, ia, ib))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn softmax_row(row: &[f64], out: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// `c[m,n] += a[m,k] @ b[k,n]` with explicit strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
    c: &mut [f64],
    beta: f64,
) {
    if m == 0 || n == 0 {
        return;
    }
    // SAFETY: slices cover m*k, k*n and m*n elements under the given strides.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
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

fn acc<'g>(nodes: &[Node], v: Var, grads: &'g mut [Option<Vec<f64>>]) -> Option<&'g mut Vec<f64>> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let slot = &mut grads[v.0];
    if slot.is_none() {
        *slot = Some(vec![0.0; nodes[v.0].value.len()]);
    }
    slot.as_mut()
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

    /// Drops every node and saved intermediate.
    pub fn clear(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `x` that blocks gradient flow.
    pub fn detach(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.clone();
        self.constant(value)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(Error::Shape {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            });
        }
        let k = sb[0];
        let n = sb[1];
        let m = numel(&sa) / k.max(1);
        let mut out = vec![0.0; m * n];
        if k > 0 {
            let av = self.nodes[a.0].value.data();
            let bv = self.nodes[b.0].value.data();
            gemm(m, k, n, av, k as isize, 1, bv, n as isize, 1, &mut out, 0.0);
        }
        let mut shape = sa[..sa.len() - 1].to_vec();
        shape.push(n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::MatMul { a, b, m, k, n },
            rg,
        ))
    }

    fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            BinaryKind::Add => "add",
            BinaryKind::Sub => "sub",
            BinaryKind::Mul => "mul",
        };
        let (shape, ia, ib) = broadcast(name, self.shape(a), self.shape(b))?;
        let av = self.nodes[a.0].value.data();
        let bv = self.nodes[b.0].value.data();
        let total = numel(&shape);
        let out: Vec<f64> = match (&ia, &ib, kind) {
            (Index::Same, Index::Same, BinaryKind::Add) => {
                av.iter().zip(bv).map(|(x, y)| x + y).collect()
            }
            (Index::Same, Index::Same, BinaryKind::Sub) => {
                av.iter().zip(bv).map(|(x, y)| x - y).collect()
            }
            (Index::Same, Index::Same, BinaryKind::Mul) => {
                av.iter().zip(bv).map(|(x, y)| x * y).collect()
            }
            _ => (0..total)
                .map(|i| {
                    let (x, y) = (av[ia.at(i)], bv[ib.at(i)]);
                    match kind {
                        BinaryKind::Add => x + y,
                        BinaryKind::Sub => x - y,
                        BinaryKind::Mul => x * y,
                    }
                })
                .collect(),
        };
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Binary { kind, a, b, ia, ib },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.map_value(x, |v| v * c);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, c), rg)
    }

    fn map_value(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = &self.nodes[x.0].value;
        Tensor::new(t.shape(), t.data().iter().map(|&v| f(v)).collect()).expect("same shape")
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.map_value(x, f64::tanh);
        let rg = self.rg(&[x]);
        self.push(value, Op::Tanh(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.map_value(x, sigmoid);
        let rg = self.rg(&[x]);
        self.push(value, Op::Sigmoid(x), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.map_value(x, |v| v.max(0.0));
        let rg = self.rg(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        let cols = match t.shape().last() {
            Some(&c) if c > 0 => c,
            _ => {
                return Err(Error::op(
                    "softmax",
                    format!("needs a non-empty last axis, got {:?}", t.shape()),
                ))
            }
        };
        let mut out = vec![0.0; t.len()];
        for (row, o) in t.data().chunks(cols).zip(out.chunks_mut(cols)) {
            softmax_row(row, o);
        }
        let value = Tensor::new(t.shape(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Softmax(x), rg))
    }

    /// Softmax over the last axis where `keep[i] == false` entries get exactly 0.
    pub fn masked_softmax(&mut self, x: Var, keep: &[bool]) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if keep.len() != t.len() || t.rank() == 0 {
            return Err(Error::Shape {
                op: "masked_softmax",
                lhs: t.shape().to_vec(),
                rhs: vec![keep.len()],
            });
        }
        let cols = *t.shape().last().unwrap();
        let mut out = vec![0.0; t.len()];
        for (r, (row, o)) in t.data().chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
            let mask = &keep[r * cols..(r + 1) * cols];
            let max = row
                .iter()
                .zip(mask)
                .filter(|(_, &k)| k)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::op(
                    "masked_softmax",
                    format!("row {r} has every position masked"),
                ));
            }
            let mut sum = 0.0;
            for ((o, &v), &k) in o.iter_mut().zip(row).zip(mask) {
                if k {
                    *o = (v - max).exp();
                    sum += *o;
                }
            }
            for o in o.iter_mut() {
                *o /= sum;
            }
        }
        let value = Tensor::new(t.shape(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::MaskedSoftmax(x), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = match parts.first() {
            Some(v) => self.shape(*v).to_vec(),
            None => return Err(Error::op("concat", "no inputs")),
        };
        if axis >= first.len() {
            return Err(Error::op(
                "concat",
                format!("axis {axis} out of range for {first:?}"),
            ));
        }
        let mut total_axis = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: first,
                    rhs: s.to_vec(),
                });
            }
            total_axis += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total_axis;
        let (outer, _, inner) = split_axis(&shape, axis);
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for p in parts {
                let t = &self.nodes[p.0].value;
                let block = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || start + len > s[axis] {
            return Err(Error::op(
                "slice",
                format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            ));
        }
        let (outer, size, inner) = split_axis(&s, axis);
        let src = self.nodes[x.0].value.data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * size * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::Slice { x, axis, start },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = &self.nodes[table.0].value;
        if t.rank() != 2 {
            return Err(Error::op(
                "embedding",
                format!("table must be rank 2, got {:?}", t.shape()),
            ));
        }
        let (rows, d) = (t.shape()[0], t.shape()[1]);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::op(
                    "embedding",
                    format!("index {id} out of range for table {:?}", t.shape()),
                ));
            }
            out.extend_from_slice(t.row(id));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(&[ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Row-wise choice: row `r` of the result is row `r` of `a` if `take_a[r]`, else of `b`.
    pub fn select_rows(&mut self, take_a: &[bool], a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb || sa.is_empty() {
            return Err(Error::Shape {
                op: "select_rows",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let cols = *sa.last().unwrap();
        let rows = numel(sa) / cols.max(1);
        if take_a.len() != rows {
            return Err(Error::Shape {
                op: "select_rows",
                lhs: sa.to_vec(),
                rhs: vec![take_a.len()],
            });
        }
        let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
        let mut out = Vec::with_capacity(av.len());
        for (r, &t) in take_a.iter().enumerate() {
            let src = if t { av } else { bv };
            out.extend_from_slice(&src[r * cols..(r + 1) * cols]);
        }
        let shape = sa.to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::SelectRows {
                mask: take_a.to_vec(),
                a,
                b,
            },
            rg,
        ))
    }

    /// Weighted mean of `-log softmax(logits)[target]` over rows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[f64]) -> Result<Var> {
        let t = &self.nodes[logits.0].value;
        if t.rank() != 2 || targets.len() != t.shape()[0] || weights.len() != targets.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len(), weights.len()],
            });
        }
        let c = t.shape()[1];
        let total_weight: f64 = weights.iter().sum();
        if total_weight <= 0.0 {
            return Err(Error::op("cross_entropy", "total weight is zero"));
        }
        let mut probs = vec![0.0; t.len()];
        let mut loss = 0.0;
        for (r, (row, p)) in t.data().chunks(c).zip(probs.chunks_mut(c)).enumerate() {
            let target = targets[r];
            if target >= c {
                return Err(Error::op(
                    "cross_entropy",
                    format!("target {target} out of range for {c} classes"),
                ));
            }
            softmax_row(row, p);
            if weights[r] != 0.0 {
                let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
                loss += weights[r] * (lse - row[target]);
            }
        }
        let value = Tensor::scalar(loss / total_weight);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                probs,
                total_weight,
            },
            rg,
        ))
    }

    /// Mean binary cross-entropy of `sigmoid(logits)` against soft `targets`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[f64]) -> Result<Var> {
        let t = &self.nodes[logits.0].value;
        if targets.len() != t.len() || t.is_empty() {
            return Err(Error::Shape {
                op: "bce_with_logits",
                lhs: t.shape().to_vec(),
                rhs: vec![targets.len()],
            });
        }
        let loss: f64 = t
            .data()
            .iter()
            .zip(targets)
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .sum::<f64>()
            / t.len() as f64;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.nodes[x.0].value.data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = &self.nodes[x.0].value;
        if t.is_empty() {
            return Err(Error::op("mean", "empty tensor"));
        }
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::scalar(m), Op::Mean(x), rg))
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::op("sum_axis", format!("axis {axis} for {s:?}")));
        }
        let (outer, size, inner) = split_axis(&s, axis);
        let src = self.nodes[x.0].value.data();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for a in 0..size {
                let base = (o * size + a) * inner;
                for (dst, v) in out[o * inner..(o + 1) * inner]
                    .iter_mut()
                    .zip(&src[base..base + inner])
                {
                    *dst += v;
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&shape, out)?, Op::SumAxis { x, axis }, rg))
    }

    /// Maximum along `axis`; ties resolve to the lowest position.
    pub fn max_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() || s[axis] == 0 {
            return Err(Error::op("max_axis", format!("axis {axis} for {s:?}")));
        }
        let (outer, size, inner) = split_axis(&s, axis);
        let src = self.nodes[x.0].value.data();
        let mut out = vec![f64::NEG_INFINITY; outer * inner];
        let mut argmax = vec![0usize; outer * inner];
        for o in 0..outer {
            for a in 0..size {
                let base = (o * size + a) * inner;
                for i in 0..inner {
                    let v = src[base + i];
                    let slot = o * inner + i;
                    if v > out[slot] {
                        out[slot] = v;
                        argmax[slot] = a;
                    }
                }
            }
        }
        let mut shape = s;
        shape.remove(axis);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(&shape, out)?,
            Op::MaxAxis { x, axis, argmax },
            rg,
        ))
    }

    /// Reverse pass from a scalar `loss`. The tape can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::Backward(
                "tape already differentiated; re-run the forward pass".into(),
            ));
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::Backward(format!(
                "loss must be scalar, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        self.consumed = true;
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(vec![1.0]);
        }

        for i in (0..=loss.0).rev() {
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[i];
            self.backprop_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }

        // Keep only leaf gradients.
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[i] = None;
            }
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                if let Some(ga) = acc(nodes, *a, grads) {
                    // ga[m,k] += g[m,n] @ b^T
                    gemm(m, n, k, g, n as isize, 1, bv, 1, n as isize, ga, 1.0);
                }
                if let Some(gb) = acc(nodes, *b, grads) {
                    // gb[k,n] += a^T[k,m] @ g[m,n]
                    gemm(k, m, n, av, 1, k as isize, g, n as isize, 1, gb, 1.0);
                }
            }
            Op::Binary { kind, a, b, ia, ib } => {
                let av = nodes[a.0].value.data();
                let bv = nodes[b.0].value.data();
                if wants(*a) {
                    let ga = acc(nodes, *a, grads).unwrap();
                    match kind {
                        BinaryKind::Add | BinaryKind::Sub => {
                            for (i, gi) in g.iter().enumerate() {
                                ga[ia.at(i)] += gi;
                            }
                        }
                        BinaryKind::Mul => {
                            for (i, gi) in g.iter().enumerate() {
                                ga[ia.at(i)] += gi * bv[ib.at(i)];
                            }
                        }
                    }
                }
                if wants(*b) {
                    let gb = acc(nodes, *b, grads).unwrap();
                    match kind {
                        BinaryKind::Add => {
                            for (i, gi) in g.iter().enumerate() {
                                gb[ib.at(i)] += gi;
                            }
                        }
                        BinaryKind::Sub => {
                            for (i, gi) in g.iter().enumerate() {
                                gb[ib.at(i)] -= gi;
                            }
                        }
                        BinaryKind::Mul => {
                            for (i, gi) in g.iter().enumerate() {
                                gb[ib.at(i)] += gi * av[ia.at(i)];
                            }
                        }
                    }
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = acc(nodes, *x, grads) {
                    for (d, gi) in gx.iter_mut().zip(g) {
                        *d += gi * c;
                    }
                }
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                if let Some(gx) = acc(nodes, *x, grads) {
                    for ((d, gi), yi) in gx.iter_mut().zip(g).zip(y) {
                        *d += gi * (1.0 - yi * yi);
                    }
                }
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                if let Some(gx) = acc(nodes, *x, grads) {
                    for ((d, gi), yi) in gx.iter_mut().zip(g).zip(y) {
                        *d += gi * yi * (1.0 - yi);
                    }
                }
            }
            Op::Relu(x) => {
                let xv = nodes[x.0].value.data();
                if let Some(gx) = acc(nodes, *x, grads) {
                    for ((d, gi), xi) in gx.iter_mut().zip(g).zip(xv) {
                        if *xi > 0.0 {
                            *d += gi;
                        }
                    }
                }
            }
            Op::Softmax(x) | Op::MaskedSoftmax(x) => {
                let y = node.value.data();
                let cols = *node.value.shape().last().unwrap();
                if let Some(gx) = acc(nodes, *x, grads) {
                    for ((yr, gr), dr) in y.chunks(cols).zip(g.chunks(cols)).zip(gx.chunks_mut(cols)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((d, yi), gi) in dr.iter_mut().zip(yr).zip(gr) {
                            *d += yi * (gi - dot);
                        }
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let (outer, _, inner) = split_axis(shape, *axis);
                let mut offset = 0;
                for p in parts {
                    let size = nodes[p.0].value.shape()[*axis];
                    if let Some(gp) = acc(nodes, *p, grads) {
                        let block = size * inner;
                        let row = shape[*axis] * inner;
                        for o in 0..outer {
                            let src = &g[o * row + offset * inner..o * row + offset * inner + block];
                            for (d, s) in gp[o * block..(o + 1) * block].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    offset += size;
                }
            }
            Op::Slice { x, axis, start } => {
                let in_shape = nodes[x.0].value.shape();
                let (outer, size, inner) = split_axis(in_shape, *axis);
                let len = node.value.shape()[*axis];
                if let Some(gx) = acc(nodes, *x, grads) {
                    for o in 0..outer {
                        let base = o * size * inner + start * inner;
                        for (d, s) in gx[base..base + len * inner]
                            .iter_mut()
                            .zip(&g[o * len * inner..(o + 1) * len * inner])
                        {
                            *d += s;
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if let Some(gx) = acc(nodes, *x, grads) {
                    for (d, s) in gx.iter_mut().zip(g) {
                        *d += s;
                    }
                }
            }
            Op::Embedding { table, ids } => {
                let d = nodes[table.0].value.shape()[1];
                if let Some(gt) = acc(nodes, *table, grads) {
                    for (r, &id) in ids.iter().enumerate() {
                        for (dst, s) in gt[id * d..(id + 1) * d].iter_mut().zip(&g[r * d..(r + 1) * d]) {
                            *dst += s;
                        }
                    }
                }
            }
            Op::SelectRows { mask, a, b } => {
                let cols = *node.value.shape().last().unwrap();
                for (target, pick) in [(*a, true), (*b, false)] {
                    if let Some(gt) = acc(nodes, target, grads) {
                        for (r, &m) in mask.iter().enumerate() {
                            if m == pick {
                                for (d, s) in gt[r * cols..(r + 1) * cols]
                                    .iter_mut()
                                    .zip(&g[r * cols..(r + 1) * cols])
                                {
                                    *d += s;
                                }
                            }
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                weights,
                probs,
                total_weight,
            } => {
                let c = nodes[logits.0].value.shape()[1];
                let scale = g[0] / total_weight;
                if let Some(gl) = acc(nodes, *logits, grads) {
                    for (r, (&t, &w)) in targets.iter().zip(weights).enumerate() {
                        if w == 0.0 {
                            continue;
                        }
                        let row = &mut gl[r * c..(r + 1) * c];
                        for (d, p) in row.iter_mut().zip(&probs[r * c..(r + 1) * c]) {
                            *d += scale * w * p;
                        }
                        row[t] -= scale * w;
                    }
                }
            }
            Op::BceWithLogits { logits, targets } => {
                let xv = nodes[logits.0].value.data();
                let scale = g[0] / xv.len() as f64;
                if let Some(gl) = acc(nodes, *logits, grads) {
                    for ((d, &x), &y) in gl.iter_mut().zip(xv).zip(targets) {
                        *d += scale * (sigmoid(x) - y);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = acc(nodes, *x, grads) {
                    for d in gx.iter_mut() {
                        *d += g[0];
                    }
                }
            }
            Op::Mean(x) => {
                let n = nodes[x.0].value.len() as f64;
                if let Some(gx) = acc(nodes, *x, grads) {
                    for d in gx.iter_mut() {
                        *d += g[0] / n;
                    }
                }
            }
            Op::SumAxis { x, axis } => {
                let (outer, size, inner) = split_axis(nodes[x.0].value.shape(), *axis);
                if let Some(gx) = acc(nodes, *x, grads) {
                    for o in 0..outer {
                        for a in 0..size {
                            let base = (o * size + a) * inner;
                            for (d, s) in gx[base..base + inner].iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
            Op::MaxAxis { x, axis, argmax } => {
                let (outer, size, inner) = split_axis(nodes[x.0].value.shape(), *axis);
                if let Some(gx) = acc(nodes, *x, grads) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let slot = o * inner + i;
                            gx[(o * size + argmax[slot]) * inner + i] += g[slot];
                        }
                    }
                }
            }
        }
    }
}
