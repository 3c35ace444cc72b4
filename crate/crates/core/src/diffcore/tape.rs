//! Append-only computation tape for reverse-mode gradients.
//!
//! Values are stored per node; frozen weights are borrowed rather than copied. Backward
//! walks the tape once in reverse order, so gradient accumulation order is fixed.

use std::borrow::Cow;
use std::sync::atomic::{AtomicU64, Ordering};

use super::kernels;
use super::tensor::Tensor;
use crate::{Error, Real, Result};

static NEXT_TAPE_ID: AtomicU64 = AtomicU64::new(1);

const LN_EPS: f64 = 1e-6;

/// Handle to a node on a specific [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var {
    tape: u64,
    idx: usize,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Scale(usize, T),
    AddScalar(usize),
    Square(usize),
    MatMul { a: usize, b: usize, n: usize, k: usize, m: usize },
    Relu(usize),
    Gelu(usize),
    Sigmoid(usize),
    LayerNorm { x: usize, gamma: Option<usize>, beta: Option<usize>, normed: Vec<T>, rstd: Vec<T>, m: usize },
    Softmax { x: usize, m: usize },
    Attention { q: usize, k: usize, v: usize, heads: usize, probs: Vec<T>, n: usize, d: usize },
    Concat { inputs: Vec<usize>, outer: usize, inners: Vec<usize> },
    Embedding { table: usize, indices: Vec<usize>, width: usize },
    Row { x: usize, index: usize, width: usize },
    Reshape(usize),
    CrossEntropy { logits: usize, target: usize, probs: Vec<T> },
    CosineDistance { u: usize, v: usize },
    Sum(usize),
    Mean(usize),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::AddRow(..) => "add_row",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Square(..) => "square",
            Op::MatMul { .. } => "matmul",
            Op::Relu(..) => "relu",
            Op::Gelu(..) => "gelu",
            Op::Sigmoid(..) => "sigmoid",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax { .. } => "softmax",
            Op::Attention { .. } => "attention",
            Op::Concat { .. } => "concat",
            Op::Embedding { .. } => "embedding",
            Op::Row { .. } => "row",
            Op::Reshape(..) => "reshape",
            Op::CrossEntropy { .. } => "cross_entropy",
            Op::CosineDistance { .. } => "cosine_distance",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
        }
    }
}

struct Node<'a, T: Clone> {
    value: Cow<'a, [T]>,
    shape: Vec<usize>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<'a, T: Real> {
    id: u64,
    nodes: Vec<Node<'a, T>>,
}

impl<T: Real> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<T: Real>(op: &'static str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn new() -> Self {
        Self { id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed), nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn idx(&self, v: Var) -> Result<usize> {
        if v.tape != self.id || v.idx >= self.nodes.len() {
            return Err(Error::Tape("variable does not belong to this tape".into()));
        }
        Ok(v.idx)
    }

    fn push(&mut self, value: Cow<'a, [T]>, shape: Vec<usize>, op: Op<T>, inputs: &[usize]) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        let idx = self.nodes.len();
        self.nodes.push(Node { value, shape, op, requires_grad });
        Var { tape: self.id, idx }
    }

    fn leaf_node(&mut self, value: Cow<'a, [T]>, shape: &[usize], requires_grad: bool) -> Result<Var> {
        if numel(shape) != value.len() || shape.is_empty() {
            return Err(Error::shape("leaf", format!("shape {shape:?} for {} values", value.len())));
        }
        check_finite("leaf", &value)?;
        let idx = self.nodes.len();
        self.nodes.push(Node { value, shape: shape.to_vec(), op: Op::Leaf, requires_grad });
        Ok(Var { tape: self.id, idx })
    }

    /// Registers a tensor by reference; it is differentiable iff the tensor requires gradients.
    pub fn leaf(&mut self, t: &'a Tensor<T>) -> Result<Var> {
        self.leaf_node(Cow::Borrowed(t.data()), t.shape(), t.requires_grad())
    }

    /// Borrowed values that never receive gradients.
    pub fn constant(&mut self, data: &'a [T], shape: &[usize]) -> Result<Var> {
        self.leaf_node(Cow::Borrowed(data), shape, false)
    }

    /// Owned values that never receive gradients.
    pub fn input(&mut self, data: Vec<T>, shape: &[usize]) -> Result<Var> {
        self.leaf_node(Cow::Owned(data), shape, false)
    }

    /// Owned differentiable leaf.
    pub fn variable(&mut self, data: Vec<T>, shape: &[usize]) -> Result<Var> {
        self.leaf_node(Cow::Owned(data), shape, true)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[self.idx(v).expect("foreign variable")].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[self.idx(v).expect("foreign variable")].shape
    }

    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[0]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[self.idx(v).expect("foreign variable")].requires_grad
    }

    fn val(&self, i: usize) -> &[T] {
        &self.nodes[i].value
    }

    fn shp(&self, i: usize) -> &[usize] {
        &self.nodes[i].shape
    }

    // ---- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        if self.shp(a) != self.shp(b) {
            return Err(Error::shape("add", format!("{:?} vs {:?}", self.shp(a), self.shp(b))));
        }
        let out: Vec<T> = self.val(a).iter().zip(self.val(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shp(a).to_vec();
        Ok(self.push(Cow::Owned(out), shape, Op::Add(a, b), &[a, b]))
    }

    /// Adds a row vector `b[m]` to every row of `x[.., m]`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var> {
        let (x, b) = (self.idx(x)?, self.idx(b)?);
        let m = *self.shp(x).last().unwrap();
        if self.val(b).len() != m {
            return Err(Error::shape("add_row", format!("{:?} vs {:?}", self.shp(x), self.shp(b))));
        }
        let bias = self.val(b);
        let out: Vec<T> = self.val(x).chunks(m).flat_map(|r| r.iter().zip(bias).map(|(&p, &q)| p + q)).collect();
        let shape = self.shp(x).to_vec();
        Ok(self.push(Cow::Owned(out), shape, Op::AddRow(x, b), &[x, b]))
    }

    /// Elementwise product; `b` may also be a single-element scalar.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (a, b) = (self.idx(a)?, self.idx(b)?);
        let out: Vec<T> = if self.shp(a) == self.shp(b) {
            self.val(a).iter().zip(self.val(b)).map(|(&x, &y)| x * y).collect()
        } else if self.val(b).len() == 1 {
            let s = self.val(b)[0];
            self.val(a).iter().map(|&x| x * s).collect()
        } else {
            return Err(Error::shape("mul", format!("{:?} vs {:?}", self.shp(a), self.shp(b))));
        };
        let shape = self.shp(a).to_vec();
        Ok(self.push(Cow::Owned(out), shape, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let a = self.idx(a)?;
        let out: Vec<T> = self.val(a).iter().map(|&x| x * c).collect();
        let shape = self.shp(a).to_vec();
        Ok(self.push(Cow::Owned(out), shape, Op::Scale(a, c), &[a]))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let a = self.idx(a)?;
        let out: Vec<T> = self.val(a).iter().map(|&x| x + c).collect();
        let shape = self.shp(a).to_vec();
        Ok(self.push(Cow::Owned(out), shape, Op::AddScalar(a), &[a]))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let out: Vec<T> = self.val(a).iter().map(|&x| x * x).collect();
        let shape = self.shp(a).to_vec();
        Ok(self.push(Cow::Owned(out), shape, Op::Square(a), &[a]))
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let out: Vec<T> = self.val(a).iter().map(|&x| x.max(T::zero())).collect();
        let shape = self.shp(a).to_vec();
        Ok(self.push(Cow::Owned(out), shape, Op::Relu(a), &[a]))
    }

    /// GELU with the tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let out: Vec<T> = self.val(a).iter().map(|&x| kernels::gelu(x)).collect();
        let shape = self.shp(a).to_vec();
        Ok(self.push(Cow::Owned(out), shape, Op::Gelu(a), &[a]))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let a = self.idx(a)?;
        let out: Vec<T> = self.val(a).iter().map(|&x| kernels::sigmoid(x)).collect();
        let shape = self.shp(a).to_vec();
        Ok(self.push(Cow::Owned(out), shape, Op::Sigmoid(a), &[a]))
    }

    // ---- linear algebra -------------------------------------------------

    /// `a[n, k] * b[k, m]`; a rank-1 `a[k]` is treated as one row and yields `[m]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ai, bi) = (self.idx(a)?, self.idx(b)?);
        let (sa, sb) = (self.shp(ai), self.shp(bi));
        let (n, k, rank1) = match sa.len() {
            1 => (1, sa[0], true),
            2 => (sa[0], sa[1], false),
            _ => return Err(Error::shape("matmul", format!("lhs rank {}", sa.len()))),
        };
        if sb.len() != 2 || sb[0] != k {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let m = sb[1];
        let out = kernels::matmul(self.val(ai), self.val(bi), n, k, m);
        let shape = if rank1 { vec![m] } else { vec![n, m] };
        Ok(self.push(Cow::Owned(out), shape, Op::MatMul { a: ai, b: bi, n, k, m }, &[ai, bi]))
    }

    /// `x * w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    /// Layer normalisation over the last axis with optional affine parameters.
    pub fn layer_norm(&mut self, x: Var, gamma: Option<Var>, beta: Option<Var>) -> Result<Var> {
        let xi = self.idx(x)?;
        let m = *self.shp(xi).last().unwrap();
        let gi = gamma.map(|g| self.idx(g)).transpose()?;
        let bi = beta.map(|b| self.idx(b)).transpose()?;
        for p in [gi, bi].into_iter().flatten() {
            if self.val(p).len() != m {
                return Err(Error::shape("layer_norm", format!("affine {:?} vs {:?}", self.shp(p), self.shp(xi))));
            }
        }
        let (normed, rstd) = kernels::layer_norm_rows(self.val(xi), m, T::lit(LN_EPS));
        let mut out = normed.clone();
        if let Some(g) = gi {
            let g = self.val(g);
            out.chunks_mut(m).for_each(|r| r.iter_mut().zip(g).for_each(|(o, &s)| *o *= s));
        }
        if let Some(b) = bi {
            let b = self.val(b);
            out.chunks_mut(m).for_each(|r| r.iter_mut().zip(b).for_each(|(o, &s)| *o += s));
        }
        let shape = self.shp(xi).to_vec();
        let inputs: Vec<usize> = std::iter::once(xi).chain(gi).chain(bi).collect();
        Ok(self.push(Cow::Owned(out), shape, Op::LayerNorm { x: xi, gamma: gi, beta: bi, normed, rstd, m }, &inputs))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let m = *self.shp(xi).last().unwrap();
        let mut out = self.val(xi).to_vec();
        kernels::softmax_rows(&mut out, m);
        let shape = self.shp(xi).to_vec();
        Ok(self.push(Cow::Owned(out), shape, Op::Softmax { x: xi, m }, &[xi]))
    }

    /// Multi-head scaled dot-product attention on `[n, d]` queries, keys and values.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let (qi, ki, vi) = (self.idx(q)?, self.idx(k)?, self.idx(v)?);
        let s = self.shp(qi).to_vec();
        if s.len() != 2 || self.shp(ki) != s.as_slice() || self.shp(vi) != s.as_slice() {
            return Err(Error::shape(
                "attention",
                format!("{:?}, {:?}, {:?}", s, self.shp(ki), self.shp(vi)),
            ));
        }
        let (n, d) = (s[0], s[1]);
        if heads == 0 || d % heads != 0 {
            return Err(Error::shape("attention", format!("width {d} not divisible by {heads} heads")));
        }
        let (out, probs) = kernels::attention(self.val(qi), self.val(ki), self.val(vi), n, d, heads);
        Ok(self.push(Cow::Owned(out), s, Op::Attention { q: qi, k: ki, v: vi, heads, probs, n, d }, &[qi, ki, vi]))
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::shape("concat", "no inputs"));
        }
        let idxs = parts.iter().map(|&p| self.idx(p)).collect::<Result<Vec<_>>>()?;
        let first = self.shp(idxs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape("concat", format!("axis {axis} for rank {}", first.len())));
        }
        let mut shape = first.clone();
        shape[axis] = 0;
        for &i in &idxs {
            let s = self.shp(i);
            let agree = s.len() == first.len() && s.iter().zip(&first).enumerate().all(|(ax, (a, b))| ax == axis || a == b);
            if !agree {
                return Err(Error::shape("concat", format!("{first:?} vs {s:?} on axis {axis}")));
            }
            shape[axis] += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inners: Vec<usize> = idxs.iter().map(|&i| self.shp(i)[axis..].iter().product()).collect();
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for (&i, &inner) in idxs.iter().zip(&inners) {
                out.extend_from_slice(&self.val(i)[o * inner..(o + 1) * inner]);
            }
        }
        Ok(self.push(Cow::Owned(out), shape, Op::Concat { inputs: idxs.clone(), outer, inners }, &idxs))
    }

    /// Gathers rows of `table[V, e]`, producing `[indices.len(), e]`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let ti = self.idx(table)?;
        let s = self.shp(ti).to_vec();
        if s.len() != 2 || indices.is_empty() {
            return Err(Error::shape("embedding", format!("table {s:?}, {} indices", indices.len())));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= s[0]) {
            return Err(Error::shape("embedding", format!("index {bad} out of {} rows", s[0])));
        }
        let width = s[1];
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            out.extend_from_slice(&self.val(ti)[i * width..(i + 1) * width]);
        }
        Ok(self.push(
            Cow::Owned(out),
            vec![indices.len(), width],
            Op::Embedding { table: ti, indices: indices.to_vec(), width },
            &[ti],
        ))
    }

    /// Row `index` of a rank-2 tensor, as a vector.
    pub fn row(&mut self, x: Var, index: usize) -> Result<Var> {
        let xi = self.idx(x)?;
        let s = self.shp(xi).to_vec();
        if s.len() != 2 || index >= s[0] {
            return Err(Error::shape("row", format!("row {index} of {s:?}")));
        }
        let width = s[1];
        let out = self.val(xi)[index * width..(index + 1) * width].to_vec();
        Ok(self.push(Cow::Owned(out), vec![width], Op::Row { x: xi, index, width }, &[xi]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let xi = self.idx(x)?;
        if numel(shape) != self.val(xi).len() || shape.is_empty() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", self.shp(xi))));
        }
        let out = self.val(xi).to_vec();
        Ok(self.push(Cow::Owned(out), shape.to_vec(), Op::Reshape(xi), &[xi]))
    }

    // ---- reductions and losses ------------------------------------------

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let s: T = self.val(xi).iter().copied().sum();
        Ok(self.push(Cow::Owned(vec![s]), vec![1], Op::Sum(xi), &[xi]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let xi = self.idx(x)?;
        let n = T::from_usize(self.val(xi).len()).unwrap();
        let s: T = self.val(xi).iter().copied().sum::<T>() / n;
        Ok(self.push(Cow::Owned(vec![s]), vec![1], Op::Mean(xi), &[xi]))
    }

    /// Cross-entropy of a logit vector against an integer target (log-sum-exp with max shift).
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let li = self.idx(logits)?;
        let z = self.val(li);
        if target >= z.len() {
            return Err(Error::shape("cross_entropy", format!("target {target} for {} logits", z.len())));
        }
        let mut probs = z.to_vec();
        kernels::softmax_rows(&mut probs, z.len());
        let max = z.iter().copied().fold(T::neg_infinity(), T::max);
        let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
        let loss = lse - z[target];
        Ok(self.push(Cow::Owned(vec![loss]), vec![1], Op::CrossEntropy { logits: li, target, probs }, &[li]))
    }

    /// `1 - u.v / (|u| |v|)`.
    pub fn cosine_distance(&mut self, u: Var, v: Var) -> Result<Var> {
        let (ui, vi) = (self.idx(u)?, self.idx(v)?);
        if self.val(ui).len() != self.val(vi).len() {
            return Err(Error::shape("cosine_distance", format!("{:?} vs {:?}", self.shp(ui), self.shp(vi))));
        }
        let (dot, nu, nv) = kernels::dot_norms(self.val(ui), self.val(vi));
        if nu == T::zero() || nv == T::zero() {
            return Err(Error::ZeroNorm("cosine_distance"));
        }
        let out = T::one() - dot / (nu.sqrt() * nv.sqrt());
        Ok(self.push(Cow::Owned(vec![out]), vec![1], Op::CosineDistance { u: ui, v: vi }, &[ui, vi]))
    }

    // ---- backward -------------------------------------------------------

    /// Propagates `d loss / d node` to every node that requires gradients.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let li = self.idx(loss)?;
        if self.nodes[li].value.len() != 1 {
            return Err(Error::Tape(format!("backward needs a scalar, got shape {:?}", self.nodes[li].shape)));
        }
        if matches!(self.nodes[li].op, Op::Leaf) {
            return Err(Error::Tape("backward called on a leaf, not a taped computation".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[li] = Some(vec![T::one()]);
        for idx in (0..=li).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backward_node(idx, &g, &mut grads);
            grads[idx] = Some(g);
        }
        // keep only gradients of differentiable nodes
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !node.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { tape: self.id, grads, lens: self.nodes.iter().map(|n| n.value.len()).collect() })
    }

    fn backward_node(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let wants = |i: usize| self.nodes[i].requires_grad;
        let mut acc = |i: usize, f: &mut dyn FnMut(&mut [T])| {
            if !self.nodes[i].requires_grad {
                return;
            }
            let len = self.nodes[i].value.len();
            let buf = grads[i].get_or_insert_with(|| vec![T::zero(); len]);
            f(buf);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, &y)| *x += y));
            }
            Op::AddRow(x, b) => {
                let m = self.nodes[*b].value.len();
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(p, &q)| *p += q));
                acc(*b, &mut |gb| {
                    for r in g.chunks(m) {
                        gb.iter_mut().zip(r).for_each(|(p, &q)| *p += q);
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                if bv.len() == av.len() {
                    acc(*a, &mut |ga| ga.iter_mut().zip(g).zip(bv).for_each(|((p, &q), &r)| *p += q * r));
                    acc(*b, &mut |gb| gb.iter_mut().zip(g).zip(av).for_each(|((p, &q), &r)| *p += q * r));
                } else {
                    let s = bv[0];
                    acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(p, &q)| *p += q * s));
                    acc(*b, &mut |gb| gb[0] += kernels::dot(g, av));
                }
            }
            Op::Scale(a, c) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(p, &q)| *p += q * *c)),
            Op::AddScalar(a) | Op::Reshape(a) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(p, &q)| *p += q)),
            Op::Square(a) => {
                let av = self.val(*a);
                acc(*a, &mut |ga| ga.iter_mut().zip(g).zip(av).for_each(|((p, &q), &x)| *p += q * (x + x)));
            }
            Op::MatMul { a, b, n, k, m } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                acc(*a, &mut |ga| kernels::matmul_nt_acc(ga, g, bv, *n, *m, *k));
                acc(*b, &mut |gb| kernels::matmul_tn_acc(gb, av, g, *n, *k, *m));
            }
            Op::Relu(a) => {
                let av = self.val(*a);
                acc(*a, &mut |ga| {
                    ga.iter_mut().zip(g).zip(av).for_each(|((p, &q), &x)| {
                        if x > T::zero() {
                            *p += q
                        }
                    })
                });
            }
            Op::Gelu(a) => {
                let av = self.val(*a);
                acc(*a, &mut |ga| ga.iter_mut().zip(g).zip(av).for_each(|((p, &q), &x)| *p += q * kernels::gelu_grad(x)));
            }
            Op::Sigmoid(a) => {
                let y = &node.value;
                acc(*a, &mut |ga| ga.iter_mut().zip(g).zip(y.iter()).for_each(|((p, &q), &s)| *p += q * s * (T::one() - s)));
            }
            Op::LayerNorm { x, gamma, beta, normed, rstd, m } => {
                let m = *m;
                let mf = T::from_usize(m).unwrap();
                if let Some(bi) = beta {
                    acc(*bi, &mut |gb| {
                        for r in g.chunks(m) {
                            gb.iter_mut().zip(r).for_each(|(p, &q)| *p += q);
                        }
                    });
                }
                if let Some(gi) = gamma {
                    acc(*gi, &mut |gg| {
                        for (r, nr) in g.chunks(m).zip(normed.chunks(m)) {
                            gg.iter_mut().zip(r).zip(nr).for_each(|((p, &q), &h)| *p += q * h);
                        }
                    });
                }
                if wants(*x) {
                    let gamma_v = gamma.map(|gi| self.val(gi));
                    acc(*x, &mut |gx| {
                        for (row, ((gr, nr), &rs)) in g.chunks(m).zip(normed.chunks(m)).zip(rstd).enumerate() {
                            let gh: Vec<T> = match gamma_v {
                                Some(gm) => gr.iter().zip(gm).map(|(&a, &b)| a * b).collect(),
                                None => gr.to_vec(),
                            };
                            let mean_g = gh.iter().copied().sum::<T>() / mf;
                            let mean_gh = gh.iter().zip(nr).map(|(&a, &b)| a * b).sum::<T>() / mf;
                            let out = &mut gx[row * m..(row + 1) * m];
                            for ((o, &ghi), &hi) in out.iter_mut().zip(&gh).zip(nr) {
                                *o += rs * (ghi - mean_g - hi * mean_gh);
                            }
                        }
                    });
                }
            }
            Op::Softmax { x, m } => {
                let y = &node.value;
                acc(*x, &mut |gx| {
                    for ((o, gr), yr) in gx.chunks_mut(*m).zip(g.chunks(*m)).zip(y.chunks(*m)) {
                        let s = kernels::dot(gr, yr);
                        for ((p, &q), &yy) in o.iter_mut().zip(gr).zip(yr) {
                            *p += yy * (q - s);
                        }
                    }
                });
            }
            Op::Attention { q, k, v, heads, probs, n, d } => {
                let len = n * d;
                let mut gq = wants(*q).then(|| vec![T::zero(); len]);
                let mut gk = wants(*k).then(|| vec![T::zero(); len]);
                let mut gv = wants(*v).then(|| vec![T::zero(); len]);
                kernels::attention_backward(
                    g,
                    self.val(*q),
                    self.val(*k),
                    self.val(*v),
                    probs,
                    *n,
                    *d,
                    *heads,
                    gq.as_deref_mut(),
                    gk.as_deref_mut(),
                    gv.as_deref_mut(),
                );
                for (i, local) in [(*q, gq), (*k, gk), (*v, gv)] {
                    if let Some(local) = local {
                        acc(i, &mut |buf| buf.iter_mut().zip(&local).for_each(|(p, &q)| *p += q));
                    }
                }
            }
            Op::Concat { inputs, outer, inners } => {
                let total: usize = inners.iter().sum();
                let mut offset = 0;
                for (&i, &inner) in inputs.iter().zip(inners) {
                    acc(i, &mut |gi| {
                        for o in 0..*outer {
                            let src = &g[o * total + offset..o * total + offset + inner];
                            gi[o * inner..(o + 1) * inner].iter_mut().zip(src).for_each(|(p, &q)| *p += q);
                        }
                    });
                    offset += inner;
                }
            }
            Op::Embedding { table, indices, width } => {
                acc(*table, &mut |gt| {
                    for (r, &i) in indices.iter().enumerate() {
                        let src = &g[r * width..(r + 1) * width];
                        gt[i * width..(i + 1) * width].iter_mut().zip(src).for_each(|(p, &q)| *p += q);
                    }
                });
            }
            Op::Row { x, index, width } => {
                acc(*x, &mut |gx| {
                    gx[index * width..(index + 1) * width].iter_mut().zip(g).for_each(|(p, &q)| *p += q);
                });
            }
            Op::Sum(x) => acc(*x, &mut |gx| gx.iter_mut().for_each(|p| *p += g[0])),
            Op::Mean(x) => {
                let n = T::from_usize(self.nodes[*x].value.len()).unwrap();
                acc(*x, &mut |gx| gx.iter_mut().for_each(|p| *p += g[0] / n));
            }
            Op::CrossEntropy { logits, target, probs } => {
                acc(*logits, &mut |gl| {
                    for (j, (p, &pr)) in gl.iter_mut().zip(probs).enumerate() {
                        let onehot = if j == *target { T::one() } else { T::zero() };
                        *p += g[0] * (pr - onehot);
                    }
                });
            }
            Op::CosineDistance { u, v } => {
                let (uv, vv) = (self.val(*u), self.val(*v));
                let (dot, nu2, nv2) = kernels::dot_norms(uv, vv);
                let (nu, nv) = (nu2.sqrt(), nv2.sqrt());
                let c = dot / (nu * nv);
                // d(1 - c)/du = -(v / (|u||v|) - c u / |u|^2)
                acc(*u, &mut |gu| {
                    for ((p, &a), &b) in gu.iter_mut().zip(uv).zip(vv) {
                        *p -= g[0] * (b / (nu * nv) - c * a / nu2);
                    }
                });
                acc(*v, &mut |gv| {
                    for ((p, &b), &a) in gv.iter_mut().zip(vv).zip(uv) {
                        *p -= g[0] * (a / (nu * nv) - c * b / nv2);
                    }
                });
            }
        }
    }

    /// Name of the primitive that produced `v`.
    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[self.idx(v).expect("foreign variable")].op.name()
    }
}

/// Gradients from one backward pass, indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    tape: u64,
    grads: Vec<Option<Vec<T>>>,
    lens: Vec<usize>,
}

impl<T: Real> Gradients<T> {
    /// The gradient of `v`, if the loss depended on it.
    pub fn get(&self, v: Var) -> Option<&[T]> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(|g| g.as_deref())
    }

    /// The gradient of `v`; zero when `v` is detached from the loss or frozen.
    pub fn wrt(&self, v: Var) -> Vec<T> {
        match self.get(v) {
            Some(g) => g.to_vec(),
            None => vec![T::zero(); self.lens.get(v.idx).copied().unwrap_or(0)],
        }
    }

    /// Adds the gradient of `v` into the tensor's gradient slot.
    pub fn accumulate_into(&self, v: Var, t: &mut Tensor<T>) -> Result<()> {
        if let Some(g) = self.get(v) {
            t.accumulate_grad(g)?;
        }
        Ok(())
    }
}
