//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to its [`Var`]s in execution
//! order, so node inputs always precede the node itself. [`Tape::backward`]
//! walks that order in reverse and accumulates vector-Jacobian products.
//!
//! Leaves are either owned tensors or borrowed ones; borrowing lets a
//! forward pass reference frozen model parameters without copying them.
//! A tape belongs to exactly one evaluation and is dropped with it.
//!
//! ```
//! use attnalign_core::{Tape, Tensor};
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(Tensor::vector(vec![1.0, 2.0]).unwrap(), true);
//! let sq = tape.mul(x, x);
//! let f = tape.sum(sq);
//! let grads = tape.backward_scalar(f).unwrap();
//! assert_eq!(grads.get(x).unwrap().data(), &[2.0, 4.0]);
//! ```

use alloc::vec;
use alloc::vec::Vec;
use core::ops::Deref;
use core::sync::atomic::{AtomicU32, Ordering};

use crate::error::{Error, Result};
use crate::tensor::{gemm, Tensor};

/// Layer-norm variance floor.
pub const LAYER_NORM_EPS: f64 = 1e-5;

static NEXT_TAPE_ID: AtomicU32 = AtomicU32::new(1);

/// Handle to a node on a particular tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var {
    tape: u32,
    index: u32,
}

impl Var {
    pub fn index(self) -> usize {
        self.index as usize
    }
}

enum Value<'a> {
    Owned(Tensor),
    Borrowed(&'a Tensor),
}

impl Deref for Value<'_> {
    type Target = Tensor;

    fn deref(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

enum Op {
    Leaf,
    MatMul { a: usize, b: usize, trans_b: bool },
    Add(usize, usize),
    AddRow { a: usize, bias: usize },
    Mul(usize, usize),
    MulConst { a: usize, factor: Vec<f64> },
    Scale { a: usize, factor: f64 },
    ConcatCols(Vec<usize>),
    SliceCols { a: usize, start: usize },
    Gather { table: usize, ids: Vec<usize> },
    Softmax { a: usize },
    LogSoftmax(usize),
    LayerNorm { x: usize, gain: usize, bias: usize, normalized: Vec<f64>, rstd: Vec<f64> },
    Relu(usize),
    Pick { a: usize, ids: Vec<usize> },
    Sum(usize),
    CrossEntropy { logits: usize, probs: Vec<f64>, targets: Vec<usize> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::AddRow { .. } => "add_row",
            Op::Mul(..) => "mul",
            Op::MulConst { .. } => "mul_const",
            Op::Scale { .. } => "scale",
            Op::ConcatCols(_) => "concat",
            Op::SliceCols { .. } => "slice",
            Op::Gather { .. } => "embedding_lookup",
            Op::Softmax { .. } => "softmax",
            Op::LogSoftmax(_) => "log_softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Relu(_) => "relu",
            Op::Pick { .. } => "pick",
            Op::Sum(_) => "sum",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

struct Node<'a> {
    value: Value<'a>,
    op: Op,
    requires_grad: bool,
}

/// Recorded computation for one evaluation.
pub struct Tape<'a> {
    id: u32,
    nodes: Vec<Node<'a>>,
    first_non_finite: Option<(usize, &'static str)>,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Tape::new()
    }
}

/// Gradients produced by one backward sweep, indexed by tape node.
pub struct Gradients {
    tape: u32,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of `v`, or `None` when `v` does not lie on a path to the
    /// seed (the gradient is then identically zero).
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.index()).and_then(Option::as_ref)
    }

    /// Gradient of `v` with zeros filled in for nodes off the seed's path.
    pub fn get_or_zeros(&self, tape: &Tape<'_>, v: Var) -> Tensor {
        match self.get(v) {
            Some(g) => g.clone(),
            None => Tensor::zeros(tape.value(v).shape()),
        }
    }
}

fn softmax_row(src: &[f64], dst: &mut [f64], valid: usize) {
    let max = src[..valid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (d, s) in dst[..valid].iter_mut().zip(&src[..valid]) {
        *d = libm::exp(s - max);
        total += *d;
    }
    for d in &mut dst[..valid] {
        *d /= total;
    }
    for d in &mut dst[valid..] {
        *d = 0.0;
    }
}

fn log_softmax_row(src: &[f64], dst: &mut [f64]) {
    let max = src.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + libm::log(src.iter().map(|s| libm::exp(s - max)).sum::<f64>());
    for (d, s) in dst.iter_mut().zip(src) {
        *d = s - lse;
    }
}

/// Row-wise softmax of a plain tensor (last axis), outside any tape.
pub fn softmax(t: &Tensor) -> Tensor {
    let cols = t.cols();
    let mut out = vec![0.0; t.len()];
    if cols > 0 {
        for (src, dst) in t.data().chunks(cols).zip(out.chunks_mut(cols)) {
            softmax_row(src, dst, cols);
        }
    }
    Tensor::from_op(t.shape().to_vec(), out)
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            first_non_finite: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn node(&self, v: Var) -> &Node<'a> {
        assert_eq!(v.tape, self.id, "Var belongs to a different tape");
        &self.nodes[v.index()]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.node(v).value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// First node whose output contained a NaN or infinity. Op outputs are
    /// scanned in debug builds; [`Tape::check_finite`] scans on demand.
    pub fn non_finite(&self) -> Option<Error> {
        self.first_non_finite.map(|(node, op)| Error::NonFinite { node, op })
    }

    /// Errors if `v`'s value, or any node flagged earlier, is non-finite.
    pub fn check_finite(&self, v: Var) -> Result<()> {
        if let Some(e) = self.non_finite() {
            return Err(e);
        }
        let node = self.node(v);
        if node.value.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite { node: v.index(), op: node.op.name() })
        }
    }

    fn push(&mut self, value: Value<'a>, op: Op, requires_grad: bool) -> Var {
        let index = self.nodes.len();
        if cfg!(debug_assertions) && self.first_non_finite.is_none() && !value.is_finite() {
            self.first_non_finite = Some((index, op.name()));
        }
        self.nodes.push(Node { value, op, requires_grad });
        Var { tape: self.id, index: index as u32 }
    }

    fn push_op(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let rg = inputs.iter().any(|&v| self.node(v).requires_grad);
        self.push(Value::Owned(Tensor::from_op(shape, data)), op, rg)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(Value::Owned(t), Op::Leaf, requires_grad)
    }

    /// Leaf borrowing an existing tensor, e.g. a frozen parameter.
    pub fn leaf_ref(&mut self, t: &'a Tensor, requires_grad: bool) -> Var {
        self.push(Value::Borrowed(t), Op::Leaf, requires_grad)
    }

    /// `a · b` for `a: [m, k]`, `b: [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` for `a: [m, k]`, `b: [n, k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape().len(), 2, "matmul lhs must be a matrix");
        assert_eq!(bv.shape().len(), 2, "matmul rhs must be a matrix");
        let (m, k) = (av.shape()[0], av.shape()[1]);
        let (bk, n) = if trans_b {
            (bv.shape()[1], bv.shape()[0])
        } else {
            (bv.shape()[0], bv.shape()[1])
        };
        assert_eq!(k, bk, "matmul inner dimensions {:?} x {:?}", av.shape(), bv.shape());
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), false, bv.data(), trans_b, &mut out, false);
        self.push_op(vec![m, n], out, Op::MatMul { a: a.index(), b: b.index(), trans_b }, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "add shapes");
        let out = av.data().iter().zip(bv.data()).map(|(x, y)| x + y).collect();
        let shape = av.shape().to_vec();
        self.push_op(shape, out, Op::Add(a.index(), b.index()), &[a, b])
    }

    /// Adds the vector `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(bias));
        let cols = av.cols();
        assert_eq!(bv.len(), cols, "add_row bias width");
        let mut out = av.data().to_vec();
        if cols > 0 {
            for row in out.chunks_mut(cols) {
                for (x, b) in row.iter_mut().zip(bv.data()) {
                    *x += b;
                }
            }
        }
        let shape = av.shape().to_vec();
        self.push_op(shape, out, Op::AddRow { a: a.index(), bias: bias.index() }, &[a, bias])
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "mul shapes");
        let out = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let shape = av.shape().to_vec();
        self.push_op(shape, out, Op::Mul(a.index(), b.index()), &[a, b])
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: Var, factor: Vec<f64>) -> Var {
        let av = self.value(a);
        assert_eq!(av.len(), factor.len(), "mul_const length");
        let out = av.data().iter().zip(&factor).map(|(x, y)| x * y).collect();
        let shape = av.shape().to_vec();
        self.push_op(shape, out, Op::MulConst { a: a.index(), factor }, &[a])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let av = self.value(a);
        let out = av.data().iter().map(|x| x * factor).collect();
        let shape = av.shape().to_vec();
        self.push_op(shape, out, Op::Scale { a: a.index(), factor }, &[a])
    }

    /// Concatenates matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat of nothing");
        let rows = self.value(parts[0]).rows();
        let widths: Vec<usize> = parts.iter().map(|&p| self.value(p).cols()).collect();
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; rows * total];
        let mut offset = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat row counts");
            for r in 0..rows {
                out[r * total + offset..r * total + offset + w].copy_from_slice(pv.row(r));
            }
            offset += w;
        }
        let idx = parts.iter().map(|p| p.index()).collect();
        self.push_op(vec![rows, total], out, Op::ConcatCols(idx), parts)
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        let (rows, cols) = (av.rows(), av.cols());
        assert!(start + len <= cols, "slice out of range");
        let mut out = Vec::with_capacity(rows * len);
        for r in 0..rows {
            out.extend_from_slice(&av.row(r)[start..start + len]);
        }
        self.push_op(vec![rows, len], out, Op::SliceCols { a: a.index(), start }, &[a])
    }

    /// Embedding lookup: row `ids[i]` of `table` becomes row `i`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Var {
        let tv = self.value(table);
        let (vocab, d) = (tv.rows(), tv.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < vocab, "embedding id {id} out of range {vocab}");
            out.extend_from_slice(tv.row(id));
        }
        self.push_op(vec![ids.len(), d], out, Op::Gather { table: table.index(), ids: ids.to_vec() }, &[table])
    }

    /// Softmax along the last axis, computed with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        self.softmax_impl(a, false)
    }

    /// Softmax where row `i` only sees columns `0..=i`; later columns get
    /// probability exactly zero.
    pub fn causal_softmax(&mut self, a: Var) -> Var {
        self.softmax_impl(a, true)
    }

    fn softmax_impl(&mut self, a: Var, causal: bool) -> Var {
        let av = self.value(a);
        let cols = av.cols();
        let mut out = vec![0.0; av.len()];
        if cols > 0 {
            for (r, (src, dst)) in av.data().chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
                let valid = if causal { (r + 1).min(cols) } else { cols };
                softmax_row(src, dst, valid);
            }
        }
        let shape = av.shape().to_vec();
        self.push_op(shape, out, Op::Softmax { a: a.index() }, &[a])
    }

    pub fn log_softmax(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let cols = av.cols();
        let mut out = vec![0.0; av.len()];
        if cols > 0 {
            for (src, dst) in av.data().chunks(cols).zip(out.chunks_mut(cols)) {
                log_softmax_row(src, dst);
            }
        }
        let shape = av.shape().to_vec();
        self.push_op(shape, out, Op::LogSoftmax(a.index()), &[a])
    }

    /// Per-row normalization to zero mean and unit variance followed by an
    /// elementwise affine map.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let cols = xv.cols();
        assert_eq!(self.value(gain).len(), cols, "layer_norm gain width");
        assert_eq!(self.value(bias).len(), cols, "layer_norm bias width");
        let rows = xv.rows();
        let mut normalized = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let s = 1.0 / libm::sqrt(var + LAYER_NORM_EPS);
            rstd[r] = s;
            for (n, v) in normalized[r * cols..(r + 1) * cols].iter_mut().zip(row) {
                *n = (v - mean) * s;
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let mut out = normalized.clone();
        for row in out.chunks_mut(cols.max(1)) {
            for ((o, gi), bi) in row.iter_mut().zip(g).zip(b) {
                *o = *o * gi + bi;
            }
        }
        let shape = xv.shape().to_vec();
        let op = Op::LayerNorm { x: x.index(), gain: gain.index(), bias: bias.index(), normalized, rstd };
        self.push_op(shape, out, op, &[x, gain, bias])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = av.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
        let shape = av.shape().to_vec();
        self.push_op(shape, out, Op::Relu(a.index()), &[a])
    }

    /// Picks `a[r, ids[r]]` from each row, giving a vector.
    pub fn pick(&mut self, a: Var, ids: &[usize]) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows(), ids.len(), "pick needs one id per row");
        let cols = av.cols();
        let out = ids
            .iter()
            .enumerate()
            .map(|(r, &id)| {
                assert!(id < cols, "pick id out of range");
                av.data()[r * cols + id]
            })
            .collect();
        self.push_op(vec![ids.len()], out, Op::Pick { a: a.index(), ids: ids.to_vec() }, &[a])
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push_op(Vec::new(), vec![s], Op::Sum(a.index()), &[a])
    }

    /// Summed negative log-likelihood of `targets` under row-wise
    /// log-softmax of `logits`, fused so no probability is ever logged.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Var {
        let lv = self.value(logits);
        let cols = lv.cols();
        assert_eq!(lv.rows(), targets.len(), "cross_entropy needs one target per row");
        let mut logp = vec![0.0; lv.len()];
        let mut loss = 0.0;
        for (r, &t) in targets.iter().enumerate() {
            assert!(t < cols, "cross_entropy target out of range");
            log_softmax_row(lv.row(r), &mut logp[r * cols..(r + 1) * cols]);
            loss -= logp[r * cols + t];
        }
        let probs = logp.into_iter().map(libm::exp).collect();
        let op = Op::CrossEntropy { logits: logits.index(), probs, targets: targets.to_vec() };
        self.push_op(Vec::new(), vec![loss], op, &[logits])
    }

    /// Backward sweep seeded with gradient 1 at a scalar output.
    pub fn backward_scalar(&self, seed: Var) -> Result<Gradients> {
        let one = Tensor::from_op(self.value(seed).shape().to_vec(), vec![1.0; self.value(seed).len()]);
        self.backward(seed, &one)
    }

    /// Accumulates `seed_grad · ∂seed/∂node` into every node that requires a
    /// gradient and lies upstream of `seed`.
    pub fn backward(&self, seed: Var, seed_grad: &Tensor) -> Result<Gradients> {
        if seed.tape != self.id || seed.index() >= self.nodes.len() {
            return Err(Error::SeedNotOnTape);
        }
        if seed_grad.shape() != self.value(seed).shape() {
            return Err(Error::ShapeMismatch {
                context: "backward",
                detail: alloc::format!(
                    "seed gradient {:?} vs output {:?}",
                    seed_grad.shape(),
                    self.value(seed).shape()
                ),
            });
        }
        let n = seed.index() + 1;
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        if self.nodes[seed.index()].requires_grad {
            grads[seed.index()] = Some(seed_grad.data().to_vec());
        }
        for i in (0..n).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| g.map(|g| Tensor::from_op(self.nodes[i].value.shape().to_vec(), g)))
            .collect();
        Ok(Gradients { tape: self.id, grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], i: usize) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[i].requires_grad {
            return None;
        }
        let len = self.nodes[i].value.len();
        Some(grads[i].get_or_insert_with(|| vec![0.0; len]))
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, trans_b } => {
                let (av, bv) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = out.shape()[1];
                if let Some(ga) = self.slot(grads, *a) {
                    // dA = dC · op(B)ᵀ
                    gemm(m, n, k, g, false, bv.data(), !*trans_b, ga, true);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    if *trans_b {
                        // B is [n, k]: dB = dCᵀ · A
                        gemm(n, m, k, g, true, av.data(), false, gb, true);
                    } else {
                        // B is [k, n]: dB = Aᵀ · dC
                        gemm(k, m, n, av.data(), true, g, false, gb, true);
                    }
                }
            }
            Op::Add(a, b) => {
                for idx in [*a, *b] {
                    if let Some(ga) = self.slot(grads, idx) {
                        ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::AddRow { a, bias } => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y);
                }
                let cols = out.cols();
                if let Some(gb) = self.slot(grads, *bias) {
                    for row in g.chunks(cols.max(1)) {
                        gb.iter_mut().zip(row).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                if let Some(ga) = self.slot(grads, *a) {
                    for ((x, gi), bi) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gi * bi;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((x, gi), ai) in gb.iter_mut().zip(g).zip(av) {
                        *x += gi * ai;
                    }
                }
            }
            Op::MulConst { a, factor } => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((x, gi), f) in ga.iter_mut().zip(g).zip(factor) {
                        *x += gi * f;
                    }
                }
            }
            Op::Scale { a, factor } => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += y * factor);
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let rows = out.rows();
                let mut offset = 0;
                for &p in parts {
                    let w = self.nodes[p].value.cols();
                    if let Some(gp) = self.slot(grads, p) {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            gp[r * w..(r + 1) * w].iter_mut().zip(src).for_each(|(x, y)| *x += y);
                        }
                    }
                    offset += w;
                }
            }
            Op::SliceCols { a, start } => {
                let cols = self.nodes[*a].value.cols();
                let w = out.cols();
                if let Some(ga) = self.slot(grads, *a) {
                    for r in 0..out.rows() {
                        let dst = &mut ga[r * cols + start..r * cols + start + w];
                        dst.iter_mut().zip(&g[r * w..(r + 1) * w]).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Gather { table, ids } => {
                let d = out.cols();
                if let Some(gt) = self.slot(grads, *table) {
                    for (r, &id) in ids.iter().enumerate() {
                        let dst = &mut gt[id * d..(id + 1) * d];
                        dst.iter_mut().zip(&g[r * d..(r + 1) * d]).for_each(|(x, y)| *x += y);
                    }
                }
            }
            Op::Softmax { a } => {
                let cols = out.cols();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((y, gr), dst) in out.data().chunks(cols).zip(g.chunks(cols)).zip(ga.chunks_mut(cols)) {
                        let dot: f64 = y.iter().zip(gr).map(|(p, q)| p * q).sum();
                        for ((d, p), q) in dst.iter_mut().zip(y).zip(gr) {
                            *d += p * (q - dot);
                        }
                    }
                }
            }
            Op::LogSoftmax(a) => {
                let cols = out.cols();
                if let Some(ga) = self.slot(grads, *a) {
                    for ((lp, gr), dst) in out.data().chunks(cols).zip(g.chunks(cols)).zip(ga.chunks_mut(cols)) {
                        let total: f64 = gr.iter().sum();
                        for ((d, l), q) in dst.iter_mut().zip(lp).zip(gr) {
                            *d += q - libm::exp(*l) * total;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, normalized, rstd } => {
                let cols = out.cols();
                let gv = self.nodes[*gain].value.data();
                if let Some(gg) = self.slot(grads, *gain) {
                    for (xh, gr) in normalized.chunks(cols).zip(g.chunks(cols)) {
                        for ((d, h), q) in gg.iter_mut().zip(xh).zip(gr) {
                            *d += q * h;
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for gr in g.chunks(cols) {
                        gb.iter_mut().zip(gr).for_each(|(d, q)| *d += q);
                    }
                }
                if let Some(gx) = self.slot(grads, *x) {
                    let n = cols as f64;
                    let mut dxhat = vec![0.0; cols];
                    for (r, s) in rstd.iter().enumerate() {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let xh = &normalized[r * cols..(r + 1) * cols];
                        for ((d, q), w) in dxhat.iter_mut().zip(gr).zip(gv) {
                            *d = q * w;
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / n;
                        let mean_dx = dxhat.iter().zip(xh).map(|(d, h)| d * h).sum::<f64>() / n;
                        for ((dst, d), h) in gx[r * cols..(r + 1) * cols].iter_mut().zip(&dxhat).zip(xh) {
                            *dst += s * (d - mean_d - h * mean_dx);
                        }
                    }
                }
            }
            Op::Relu(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, q), y) in ga.iter_mut().zip(g).zip(out.data()) {
                        if *y > 0.0 {
                            *d += q;
                        }
                    }
                }
            }
            Op::Pick { a, ids } => {
                let cols = self.nodes[*a].value.cols();
                if let Some(ga) = self.slot(grads, *a) {
                    for (r, &id) in ids.iter().enumerate() {
                        ga[r * cols + id] += g[r];
                    }
                }
            }
            Op::Sum(a) => {
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::CrossEntropy { logits, probs, targets } => {
                let cols = self.nodes[*logits].value.cols();
                if let Some(gl) = self.slot(grads, *logits) {
                    for (r, &t) in targets.iter().enumerate() {
                        let row = &mut gl[r * cols..(r + 1) * cols];
                        for (d, p) in row.iter_mut().zip(&probs[r * cols..(r + 1) * cols]) {
                            *d += g[0] * p;
                        }
                        row[t] -= g[0];
                    }
                }
            }
        }
    }
}
