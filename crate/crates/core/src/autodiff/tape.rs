//! Operation tape for reverse-mode differentiation.
//!
//! Every forward op appends a node holding its value and enough saved state
//! to run its vector-Jacobian product. Node ids are assigned in creation
//! order, so walking ids in reverse is a valid reverse topological order.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use rayon::prelude::*;

use super::real::{gemm, MatRef, Real};
use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug)]
enum Op<E> {
    Leaf,
    MatMul { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize, shared_rhs: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddLast { a: usize, v: usize },
    MulLast { a: usize, v: usize },
    BroadcastTokens { v: usize, tokens: usize },
    Scale { a: usize, s: E },
    AddScalar(usize),
    LayerNorm { a: usize, rstd: Vec<E> },
    Softmax { a: usize, outer: usize, len: usize, inner: usize },
    Attention { q: usize, k: usize, v: usize, heads: usize, probs: Vec<E> },
    Gelu(usize),
    Silu(usize),
    Sum(usize),
    Mean(usize),
    Concat { parts: Vec<(usize, usize)>, outer: usize, inner: usize },
    Slice { a: usize, outer: usize, len_in: usize, start: usize, len: usize, inner: usize },
    Reshape(usize),
}

struct Node<E: Real> {
    value: Rc<Tensor<E>>,
    op: Op<E>,
    needs_grad: bool,
}

/// Records forward ops and counts multiply-adds issued by `matmul` and
/// `attention`.
pub struct Tape<E: Real = f32> {
    nodes: RefCell<Vec<Node<E>>>,
    flops: Cell<u64>,
    consumed: Cell<bool>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t, E: Real = f32> {
    tape: &'t Tape<E>,
    id: usize,
}

impl<E: Real> std::fmt::Debug for Var<'_, E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

/// Gradients produced by [`Tape::backward`], indexed by var.
pub struct Gradients<E: Real> {
    grads: Vec<Option<Vec<E>>>,
}

impl<E: Real> Gradients<E> {
    pub fn get(&self, var: &Var<'_, E>) -> Option<&[E]> {
        self.grads.get(var.id).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, var: &Var<'_, E>) -> Option<Vec<E>> {
        self.grads.get_mut(var.id).and_then(Option::take)
    }
}

impl<E: Real> Default for Tape<E> {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite<E: Real>(data: &[E], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

/// Splits `shape` around `axis` into (outer, axis_len, inner).
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn gelu_parts<E: Real>(x: E) -> (E, E) {
    // tanh approximation: 0.5 x (1 + tanh(c (x + 0.044715 x^3)))
    let c = E::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = E::from_f64_lossy(0.044715);
    let half = E::from_f64_lossy(0.5);
    let three = E::from_f64_lossy(3.0);
    let inner = c * (x + k * x * x * x);
    let th = inner.tanh();
    let y = half * x * (E::one() + th);
    let dinner = c * (E::one() + three * k * x * x);
    let dy = half * (E::one() + th) + half * x * (E::one() - th * th) * dinner;
    (y, dy)
}

fn sigmoid<E: Real>(x: E) -> E {
    E::one() / (E::one() + (-x).exp())
}

impl<E: Real> Tape<E> {
    pub fn new() -> Self {
        Tape { nodes: RefCell::new(Vec::new()), flops: Cell::new(0), consumed: Cell::new(false) }
    }

    /// Multiply-adds recorded since creation or the last [`Tape::reset_flops`].
    pub fn flops(&self) -> u64 {
        self.flops.get()
    }

    pub fn reset_flops(&self) {
        self.flops.set(0);
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Drops every recorded node so the tape can be reused. The FLOP counter
    /// is left untouched.
    pub fn reset(&self) {
        self.nodes.borrow_mut().clear();
        self.consumed.set(false);
    }

    fn push(&self, value: Tensor<E>, op: Op<E>, needs_grad: bool) -> Var<'_, E> {
        let mut nodes = self.nodes.borrow_mut();
        let id = nodes.len();
        nodes.push(Node { value: Rc::new(value), op, needs_grad });
        Var { tape: self, id }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<E>> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn needs(&self, id: usize) -> bool {
        self.nodes.borrow()[id].needs_grad
    }

    fn add_flops(&self, n: u64) {
        self.flops.set(self.flops.get() + n);
    }

    /// Records a leaf. Gradients are tracked when `tensor.requires_grad`.
    pub fn leaf(&self, tensor: Tensor<E>) -> Result<Var<'_, E>> {
        check_finite(tensor.data(), "leaf")?;
        let needs = tensor.requires_grad;
        Ok(self.push(tensor, Op::Leaf, needs))
    }

    /// Records a copy of a parameter that will receive a gradient.
    pub fn param(&self, tensor: &Tensor<E>) -> Result<Var<'_, E>> {
        let mut t = Tensor::new(tensor.shape(), tensor.data().to_vec())?;
        t.requires_grad = true;
        self.leaf(t)
    }

    /// Records a constant (never differentiated).
    pub fn constant(&self, tensor: Tensor<E>) -> Result<Var<'_, E>> {
        let mut t = tensor;
        t.requires_grad = false;
        self.leaf(t)
    }

    /// Runs reverse accumulation from a scalar `loss`.
    pub fn backward(&self, loss: &Var<'_, E>) -> Result<Gradients<E>> {
        if self.consumed.get() {
            return Err(Error::Backward("tape already consumed; call reset() first"));
        }
        let nodes = self.nodes.borrow();
        let root = &nodes[loss.id];
        if root.value.numel() != 1 {
            return Err(Error::Backward("loss must be a scalar"));
        }
        self.consumed.set(true);
        let mut grads: Vec<Option<Vec<E>>> = vec![None; nodes.len()];
        grads[loss.id] = Some(vec![E::one()]);
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop(&nodes, id, &g, &mut grads);
        }
        // Keep only leaf gradients.
        for (id, node) in nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.needs_grad {
                grads[id] = None;
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate<E: Real>(grads: &mut [Option<Vec<E>>], id: usize, g: Vec<E>) {
    match &mut grads[id] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
        slot @ None => *slot = Some(g),
    }
}

fn backprop<E: Real>(nodes: &[Node<E>], id: usize, g: &[E], grads: &mut [Option<Vec<E>>]) {
    let out = &nodes[id].value;
    let needs = |i: usize| nodes[i].needs_grad;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::MatMul { a, b, batch, m, k, n, shared_rhs } => {
            let (batch, m, k, n) = (*batch, *m, *k, *n);
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            if needs(*a) {
                let mut da = vec![E::zero(); batch * m * k];
                if *shared_rhs {
                    // dA = dC . B^T over the flattened batch
                    gemm(batch * m, n, k, MatRef::rows(g, n), MatRef::rows_t(bv, n), E::zero(), &mut da, k, 1);
                } else {
                    for bi in 0..batch {
                        gemm(
                            m,
                            n,
                            k,
                            MatRef::rows(&g[bi * m * n..], n),
                            MatRef::rows_t(&bv[bi * k * n..], n),
                            E::zero(),
                            &mut da[bi * m * k..],
                            k,
                            1,
                        );
                    }
                }
                accumulate(grads, *a, da);
            }
            if needs(*b) {
                if *shared_rhs {
                    let mut db = vec![E::zero(); k * n];
                    gemm(k, batch * m, n, MatRef::rows_t(av, k), MatRef::rows(g, n), E::zero(), &mut db, n, 1);
                    accumulate(grads, *b, db);
                } else {
                    let mut db = vec![E::zero(); batch * k * n];
                    for bi in 0..batch {
                        gemm(
                            k,
                            m,
                            n,
                            MatRef::rows_t(&av[bi * m * k..], k),
                            MatRef::rows(&g[bi * m * n..], n),
                            E::zero(),
                            &mut db[bi * k * n..],
                            n,
                            1,
                        );
                    }
                    accumulate(grads, *b, db);
                }
            }
        }
        Op::Add(a, b) => {
            if needs(*a) {
                accumulate(grads, *a, g.to_vec());
            }
            if needs(*b) {
                accumulate(grads, *b, g.to_vec());
            }
        }
        Op::Sub(a, b) => {
            if needs(*a) {
                accumulate(grads, *a, g.to_vec());
            }
            if needs(*b) {
                accumulate(grads, *b, g.iter().map(|&x| -x).collect());
            }
        }
        Op::Mul(a, b) => {
            let av = nodes[*a].value.data();
            let bv = nodes[*b].value.data();
            if needs(*a) {
                accumulate(grads, *a, g.iter().zip(bv).map(|(&g, &b)| g * b).collect());
            }
            if needs(*b) {
                accumulate(grads, *b, g.iter().zip(av).map(|(&g, &a)| g * a).collect());
            }
        }
        Op::AddLast { a, v } => {
            if needs(*a) {
                accumulate(grads, *a, g.to_vec());
            }
            if needs(*v) {
                let d = nodes[*v].value.numel();
                let mut dv = vec![E::zero(); d];
                for row in g.chunks(d) {
                    dv.iter_mut().zip(row).for_each(|(acc, &x)| *acc = *acc + x);
                }
                accumulate(grads, *v, dv);
            }
        }
        Op::MulLast { a, v } => {
            let av = nodes[*a].value.data();
            let vv = nodes[*v].value.data();
            let d = vv.len();
            if needs(*a) {
                let da = g.chunks(d).flat_map(|row| row.iter().zip(vv).map(|(&g, &v)| g * v)).collect();
                accumulate(grads, *a, da);
            }
            if needs(*v) {
                let mut dv = vec![E::zero(); d];
                for (row, arow) in g.chunks(d).zip(av.chunks(d)) {
                    for j in 0..d {
                        dv[j] = dv[j] + row[j] * arow[j];
                    }
                }
                accumulate(grads, *v, dv);
            }
        }
        Op::BroadcastTokens { v, tokens } => {
            if needs(*v) {
                let shape = nodes[*v].value.shape();
                let (b, d) = (shape[0], shape[1]);
                let mut dv = vec![E::zero(); b * d];
                for bi in 0..b {
                    for t in 0..*tokens {
                        let row = &g[(bi * tokens + t) * d..(bi * tokens + t + 1) * d];
                        let acc = &mut dv[bi * d..(bi + 1) * d];
                        acc.iter_mut().zip(row).for_each(|(a, &x)| *a = *a + x);
                    }
                }
                accumulate(grads, *v, dv);
            }
        }
        Op::Scale { a, s } => {
            if needs(*a) {
                accumulate(grads, *a, g.iter().map(|&x| x * *s).collect());
            }
        }
        Op::AddScalar(a) => {
            if needs(*a) {
                accumulate(grads, *a, g.to_vec());
            }
        }
        Op::LayerNorm { a, rstd } => {
            if needs(*a) {
                let y = out.data();
                let d = *out.shape().last().unwrap_or(&1);
                let inv_d = E::one() / E::from_usize(d).unwrap_or_else(E::one);
                let mut da = vec![E::zero(); y.len()];
                for (r, ((gr, yr), dr)) in g.chunks(d).zip(y.chunks(d)).zip(da.chunks_mut(d)).enumerate() {
                    let mean_g = gr.iter().copied().sum::<E>() * inv_d;
                    let mean_gy = gr.iter().zip(yr).map(|(&g, &y)| g * y).sum::<E>() * inv_d;
                    for j in 0..d {
                        dr[j] = rstd[r] * (gr[j] - mean_g - yr[j] * mean_gy);
                    }
                }
                accumulate(grads, *a, da);
            }
        }
        Op::Softmax { a, outer, len, inner } => {
            if needs(*a) {
                let y = out.data();
                let mut da = vec![E::zero(); y.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot: E = (0..*len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                        for j in 0..*len {
                            da[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                accumulate(grads, *a, da);
            }
        }
        Op::Attention { q, k, v, heads, probs } => {
            let (dq, dk, dv) = attention_backward(
                nodes[*q].value.as_ref(),
                nodes[*k].value.as_ref(),
                nodes[*v].value.as_ref(),
                *heads,
                probs,
                g,
            );
            if needs(*q) {
                accumulate(grads, *q, dq);
            }
            if needs(*k) {
                accumulate(grads, *k, dk);
            }
            if needs(*v) {
                accumulate(grads, *v, dv);
            }
        }
        Op::Gelu(a) => {
            if needs(*a) {
                let x = nodes[*a].value.data();
                accumulate(grads, *a, g.iter().zip(x).map(|(&g, &x)| g * gelu_parts(x).1).collect());
            }
        }
        Op::Silu(a) => {
            if needs(*a) {
                let x = nodes[*a].value.data();
                let da = g
                    .iter()
                    .zip(x)
                    .map(|(&g, &x)| {
                        let s = sigmoid(x);
                        g * (s + x * s * (E::one() - s))
                    })
                    .collect();
                accumulate(grads, *a, da);
            }
        }
        Op::Sum(a) => {
            if needs(*a) {
                accumulate(grads, *a, vec![g[0]; nodes[*a].value.numel()]);
            }
        }
        Op::Mean(a) => {
            if needs(*a) {
                let n = nodes[*a].value.numel();
                let s = g[0] / E::from_usize(n).unwrap_or_else(E::one);
                accumulate(grads, *a, vec![s; n]);
            }
        }
        Op::Concat { parts, outer, inner } => {
            let total: usize = parts.iter().map(|p| p.1).sum();
            let mut offset = 0;
            for &(pid, len) in parts {
                if needs(pid) {
                    let mut dp = Vec::with_capacity(outer * len * inner);
                    for o in 0..*outer {
                        let base = (o * total + offset) * inner;
                        dp.extend_from_slice(&g[base..base + len * inner]);
                    }
                    accumulate(grads, pid, dp);
                }
                offset += len;
            }
        }
        Op::Slice { a, outer, len_in, start, len, inner } => {
            if needs(*a) {
                let mut da = vec![E::zero(); outer * len_in * inner];
                for o in 0..*outer {
                    let src = &g[o * len * inner..(o + 1) * len * inner];
                    let base = (o * len_in + start) * inner;
                    da[base..base + len * inner].copy_from_slice(src);
                }
                accumulate(grads, *a, da);
            }
        }
        Op::Reshape(a) => {
            if needs(*a) {
                accumulate(grads, *a, g.to_vec());
            }
        }
    }
}

struct AttnDims {
    batch: usize,
    lq: usize,
    lk: usize,
    d: usize,
    heads: usize,
    dh: usize,
}

fn attention_dims<E: Real>(q: &Tensor<E>, k: &Tensor<E>, v: &Tensor<E>, heads: usize) -> Result<AttnDims> {
    let (qs, ks, vs) = (q.shape(), k.shape(), v.shape());
    if qs.len() < 2 || ks.len() != qs.len() || vs.len() != qs.len() {
        return Err(Error::shape("attention", format!("ranks {qs:?} {ks:?} {vs:?}")));
    }
    let r = qs.len();
    if qs[..r - 2] != ks[..r - 2] || ks != vs {
        return Err(Error::shape("attention", format!("batch/kv mismatch {qs:?} {ks:?} {vs:?}")));
    }
    let d = qs[r - 1];
    if ks[r - 1] != d {
        return Err(Error::shape("attention", format!("feature mismatch {qs:?} {ks:?}")));
    }
    if heads == 0 || d % heads != 0 {
        return Err(Error::shape("attention", format!("dim {d} not divisible by {heads} heads")));
    }
    Ok(AttnDims {
        batch: qs[..r - 2].iter().product(),
        lq: qs[r - 2],
        lk: ks[r - 2],
        d,
        heads,
        dh: d / heads,
    })
}

fn attention_forward<E: Real>(q: &Tensor<E>, k: &Tensor<E>, v: &Tensor<E>, dims: &AttnDims) -> (Vec<E>, Vec<E>) {
    let AttnDims { batch, lq, lk, d, heads, dh } = *dims;
    let scale = E::one() / E::from_usize(dh).unwrap_or_else(E::one).sqrt();
    let mut out = vec![E::zero(); batch * lq * d];
    let mut probs = vec![E::zero(); batch * heads * lq * lk];
    out.par_chunks_mut(lq * d).zip(probs.par_chunks_mut(heads * lq * lk)).enumerate().for_each(
        |(b, (ob, pb))| {
            let qb = &q.data()[b * lq * d..(b + 1) * lq * d];
            let kb = &k.data()[b * lk * d..(b + 1) * lk * d];
            let vb = &v.data()[b * lk * d..(b + 1) * lk * d];
            for h in 0..heads {
                let p = &mut pb[h * lq * lk..(h + 1) * lq * lk];
                gemm(
                    lq,
                    dh,
                    lk,
                    MatRef::strided(&qb[h * dh..], d, 1),
                    MatRef::strided(&kb[h * dh..], 1, d),
                    E::zero(),
                    p,
                    lk,
                    1,
                );
                for row in p.chunks_mut(lk) {
                    let mx = row.iter().fold(E::neg_infinity(), |m, &x| m.max(x * scale));
                    let mut total = E::zero();
                    for x in row.iter_mut() {
                        *x = (*x * scale - mx).exp();
                        total = total + *x;
                    }
                    for x in row.iter_mut() {
                        *x = *x / total;
                    }
                }
                gemm(lq, lk, dh, MatRef::rows(p, lk), MatRef::strided(&vb[h * dh..], d, 1), E::zero(), &mut ob[h * dh..], d, 1);
            }
        },
    );
    (out, probs)
}

fn attention_backward<E: Real>(
    q: &Tensor<E>,
    k: &Tensor<E>,
    v: &Tensor<E>,
    heads: usize,
    probs: &[E],
    g: &[E],
) -> (Vec<E>, Vec<E>, Vec<E>) {
    let r = q.shape().len();
    let batch: usize = q.shape()[..r - 2].iter().product();
    let (lq, lk, d) = (q.shape()[r - 2], k.shape()[r - 2], q.shape()[r - 1]);
    let dh = d / heads;
    let scale = E::one() / E::from_usize(dh).unwrap_or_else(E::one).sqrt();
    let mut dq = vec![E::zero(); batch * lq * d];
    let mut dk = vec![E::zero(); batch * lk * d];
    let mut dv = vec![E::zero(); batch * lk * d];
    dq.par_chunks_mut(lq * d)
        .zip(dk.par_chunks_mut(lk * d))
        .zip(dv.par_chunks_mut(lk * d))
        .enumerate()
        .for_each(|(b, ((dqb, dkb), dvb))| {
            let qb = &q.data()[b * lq * d..(b + 1) * lq * d];
            let kb = &k.data()[b * lk * d..(b + 1) * lk * d];
            let vb = &v.data()[b * lk * d..(b + 1) * lk * d];
            let gb = &g[b * lq * d..(b + 1) * lq * d];
            let mut ds = vec![E::zero(); lq * lk];
            for h in 0..heads {
                let p = &probs[(b * heads + h) * lq * lk..(b * heads + h + 1) * lq * lk];
                // dP = dO . V^T
                gemm(lq, dh, lk, MatRef::strided(&gb[h * dh..], d, 1), MatRef::strided(&vb[h * dh..], 1, d), E::zero(), &mut ds, lk, 1);
                // dV = P^T . dO
                gemm(lk, lq, dh, MatRef::rows_t(p, lk), MatRef::strided(&gb[h * dh..], d, 1), E::zero(), &mut dvb[h * dh..], d, 1);
                for (dsr, pr) in ds.chunks_mut(lk).zip(p.chunks(lk)) {
                    let dot: E = dsr.iter().zip(pr).map(|(&a, &b)| a * b).sum();
                    for (x, &pv) in dsr.iter_mut().zip(pr) {
                        *x = pv * (*x - dot) * scale;
                    }
                }
                // dQ = dS . K ; dK = dS^T . Q
                gemm(lq, lk, dh, MatRef::rows(&ds, lk), MatRef::strided(&kb[h * dh..], d, 1), E::zero(), &mut dqb[h * dh..], d, 1);
                gemm(lk, lq, dh, MatRef::rows_t(&ds, lk), MatRef::strided(&qb[h * dh..], d, 1), E::zero(), &mut dkb[h * dh..], d, 1);
            }
        });
    (dq, dk, dv)
}

impl<'t, E: Real> Var<'t, E> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape<E> {
        self.tape
    }

    pub fn value(&self) -> Rc<Tensor<E>> {
        self.tape.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    /// Scalar value of a single-element var.
    pub fn item(&self) -> E {
        self.value().data()[0]
    }

    fn same_tape(&self, other: &Var<'_, E>, op: &'static str) -> Result<()> {
        if std::ptr::eq(self.tape, other.tape) {
            Ok(())
        } else {
            Err(Error::shape(op, "operands recorded on different tapes"))
        }
    }

    fn finish(&self, op: &'static str, shape: &[usize], data: Vec<E>, kind: Op<E>, inputs: &[usize]) -> Result<Var<'t, E>> {
        check_finite(&data, op)?;
        let needs = inputs.iter().any(|&i| self.tape.needs(i));
        Ok(self.tape.push(Tensor::new(shape, data)?, kind, needs))
    }

    /// Batched matrix product. `self` is `[.., i, k]`; `rhs` is either a
    /// shared `[k, j]` matrix or has the same leading dims as `self`.
    pub fn matmul(&self, rhs: &Var<'t, E>) -> Result<Var<'t, E>> {
        self.same_tape(rhs, "matmul")?;
        let a = self.value();
        let b = rhs.value();
        let (sa, sb) = (a.shape(), b.shape());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}")));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::shape("matmul", format!("inner dims {sa:?} x {sb:?}")));
        }
        let lead = &sa[..sa.len() - 2];
        let batch: usize = lead.iter().product();
        let shared_rhs = sb.len() == 2;
        if !shared_rhs && sb[..sb.len() - 2] != *lead {
            return Err(Error::shape("matmul", format!("batch dims {sa:?} x {sb:?}")));
        }
        let mut out = vec![E::zero(); batch * m * n];
        if shared_rhs {
            gemm(batch * m, k, n, MatRef::rows(a.data(), k), MatRef::rows(b.data(), n), E::zero(), &mut out, n, 1);
        } else {
            for bi in 0..batch {
                gemm(
                    m,
                    k,
                    n,
                    MatRef::rows(&a.data()[bi * m * k..], k),
                    MatRef::rows(&b.data()[bi * k * n..], n),
                    E::zero(),
                    &mut out[bi * m * n..],
                    n,
                    1,
                );
            }
        }
        self.tape.add_flops((batch * m * k * n) as u64);
        let mut shape = lead.to_vec();
        shape.extend([m, n]);
        self.finish("matmul", &shape, out, Op::MatMul { a: self.id, b: rhs.id, batch, m, k, n, shared_rhs }, &[self.id, rhs.id])
    }

    fn zip_same(&self, rhs: &Var<'t, E>, op: &'static str, f: impl Fn(E, E) -> E) -> Result<(Vec<usize>, Vec<E>)> {
        self.same_tape(rhs, op)?;
        let a = self.value();
        let b = rhs.value();
        if a.shape() != b.shape() {
            return Err(Error::shape(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok((a.shape().to_vec(), data))
    }

    pub fn add(&self, rhs: &Var<'t, E>) -> Result<Var<'t, E>> {
        let (shape, data) = self.zip_same(rhs, "add", |a, b| a + b)?;
        self.finish("add", &shape, data, Op::Add(self.id, rhs.id), &[self.id, rhs.id])
    }

    pub fn sub(&self, rhs: &Var<'t, E>) -> Result<Var<'t, E>> {
        let (shape, data) = self.zip_same(rhs, "sub", |a, b| a - b)?;
        self.finish("sub", &shape, data, Op::Sub(self.id, rhs.id), &[self.id, rhs.id])
    }

    pub fn mul(&self, rhs: &Var<'t, E>) -> Result<Var<'t, E>> {
        let (shape, data) = self.zip_same(rhs, "mul", |a, b| a * b)?;
        self.finish("mul", &shape, data, Op::Mul(self.id, rhs.id), &[self.id, rhs.id])
    }

    fn last_dim_check(&self, v: &Var<'t, E>, op: &'static str) -> Result<(Rc<Tensor<E>>, Rc<Tensor<E>>)> {
        self.same_tape(v, op)?;
        let a = self.value();
        let b = v.value();
        if b.shape().len() != 1 || a.shape().last() != Some(&b.shape()[0]) {
            return Err(Error::shape(op, format!("{:?} with {:?}", a.shape(), b.shape())));
        }
        Ok((a, b))
    }

    /// Adds a vector along the last axis (bias broadcast).
    pub fn add_last(&self, v: &Var<'t, E>) -> Result<Var<'t, E>> {
        let (a, b) = self.last_dim_check(v, "add_last")?;
        let d = b.numel();
        let data = a.data().chunks(d).flat_map(|r| r.iter().zip(b.data()).map(|(&x, &y)| x + y)).collect();
        self.finish("add_last", a.shape(), data, Op::AddLast { a: self.id, v: v.id }, &[self.id, v.id])
    }

    /// Multiplies by a vector along the last axis (gain broadcast).
    pub fn mul_last(&self, v: &Var<'t, E>) -> Result<Var<'t, E>> {
        let (a, b) = self.last_dim_check(v, "mul_last")?;
        let d = b.numel();
        let data = a.data().chunks(d).flat_map(|r| r.iter().zip(b.data()).map(|(&x, &y)| x * y)).collect();
        self.finish("mul_last", a.shape(), data, Op::MulLast { a: self.id, v: v.id }, &[self.id, v.id])
    }

    /// `[B, D]` -> `[B, tokens, D]` by repeating each row.
    pub fn broadcast_tokens(&self, tokens: usize) -> Result<Var<'t, E>> {
        let a = self.value();
        if a.shape().len() != 2 || tokens == 0 {
            return Err(Error::shape("broadcast_tokens", format!("{:?}", a.shape())));
        }
        let (b, d) = (a.shape()[0], a.shape()[1]);
        let mut data = Vec::with_capacity(b * tokens * d);
        for row in a.data().chunks(d) {
            for _ in 0..tokens {
                data.extend_from_slice(row);
            }
        }
        self.finish("broadcast_tokens", &[b, tokens, d], data, Op::BroadcastTokens { v: self.id, tokens }, &[self.id])
    }

    pub fn scale(&self, s: E) -> Result<Var<'t, E>> {
        let a = self.value();
        let data = a.data().iter().map(|&x| x * s).collect();
        self.finish("scale", a.shape(), data, Op::Scale { a: self.id, s }, &[self.id])
    }

    pub fn add_scalar(&self, s: E) -> Result<Var<'t, E>> {
        let a = self.value();
        let data = a.data().iter().map(|&x| x + s).collect();
        self.finish("add_scalar", a.shape(), data, Op::AddScalar(self.id), &[self.id])
    }

    /// Standardizes over the last axis: `(x - mean) / sqrt(var + eps)`.
    pub fn layer_norm(&self, eps: f64) -> Result<Var<'t, E>> {
        if !(eps > 0.0) {
            return Err(Error::invalid("layer_norm eps must be positive"));
        }
        let a = self.value();
        let d = *a.shape().last().ok_or_else(|| Error::shape("layer_norm", "scalar input"))?;
        let eps = E::from_f64_lossy(eps);
        let inv_d = E::one() / E::from_usize(d).unwrap_or_else(E::one);
        let mut out = Vec::with_capacity(a.numel());
        let mut rstd = Vec::with_capacity(a.numel() / d);
        for row in a.data().chunks(d) {
            let mean = row.iter().copied().sum::<E>() * inv_d;
            let var = row.iter().map(|&x| (x - mean) * (x - mean)).sum::<E>() * inv_d;
            let r = E::one() / (var + eps).sqrt();
            rstd.push(r);
            out.extend(row.iter().map(|&x| (x - mean) * r));
        }
        self.finish("layer_norm", a.shape(), out, Op::LayerNorm { a: self.id, rstd }, &[self.id])
    }

    /// Layer norm followed by an elementwise gain and bias.
    pub fn layer_norm_affine(&self, gain: &Var<'t, E>, bias: &Var<'t, E>, eps: f64) -> Result<Var<'t, E>> {
        self.layer_norm(eps)?.mul_last(gain)?.add_last(bias)
    }

    /// Numerically stabilized softmax along `axis`.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t, E>> {
        let a = self.value();
        if axis >= a.shape().len() {
            return Err(Error::shape("softmax", format!("axis {axis} for {:?}", a.shape())));
        }
        let (outer, len, inner) = split_axis(a.shape(), axis);
        let x = a.data();
        let mut y = vec![E::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mx = (0..len).fold(E::neg_infinity(), |m, j| m.max(x[idx(j)]));
                let mut total = E::zero();
                for j in 0..len {
                    let e = (x[idx(j)] - mx).exp();
                    y[idx(j)] = e;
                    total = total + e;
                }
                for j in 0..len {
                    y[idx(j)] = y[idx(j)] / total;
                }
            }
        }
        self.finish("softmax", a.shape(), y, Op::Softmax { a: self.id, outer, len, inner }, &[self.id])
    }

    /// Multi-head scaled dot-product attention over already-projected
    /// queries `[.., Lq, d]`, keys and values `[.., Lk, d]`.
    pub fn attention(&self, k: &Var<'t, E>, v: &Var<'t, E>, heads: usize) -> Result<Var<'t, E>> {
        self.same_tape(k, "attention")?;
        self.same_tape(v, "attention")?;
        let (qt, kt, vt) = (self.value(), k.value(), v.value());
        let dims = attention_dims(&qt, &kt, &vt, heads)?;
        let (out, probs) = attention_forward(&qt, &kt, &vt, &dims);
        self.tape.add_flops(2 * (dims.batch * dims.lq * dims.lk * dims.d) as u64);
        self.finish(
            "attention",
            qt.shape(),
            out,
            Op::Attention { q: self.id, k: k.id, v: v.id, heads, probs },
            &[self.id, k.id, v.id],
        )
    }

    pub fn gelu(&self) -> Result<Var<'t, E>> {
        let a = self.value();
        let data = a.data().iter().map(|&x| gelu_parts(x).0).collect();
        self.finish("gelu", a.shape(), data, Op::Gelu(self.id), &[self.id])
    }

    pub fn silu(&self) -> Result<Var<'t, E>> {
        let a = self.value();
        let data = a.data().iter().map(|&x| x * sigmoid(x)).collect();
        self.finish("silu", a.shape(), data, Op::Silu(self.id), &[self.id])
    }

    pub fn sum(&self) -> Result<Var<'t, E>> {
        let a = self.value();
        let s = a.data().iter().copied().sum();
        self.finish("sum", &[], vec![s], Op::Sum(self.id), &[self.id])
    }

    pub fn mean(&self) -> Result<Var<'t, E>> {
        let a = self.value();
        let n = E::from_usize(a.numel()).unwrap_or_else(E::one);
        let s = a.data().iter().copied().sum::<E>() / n;
        self.finish("mean", &[], vec![s], Op::Mean(self.id), &[self.id])
    }

    pub fn square(&self) -> Result<Var<'t, E>> {
        self.mul(self)
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t, E>], axis: usize) -> Result<Var<'t, E>> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let base = values[0].shape().to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} for {base:?}")));
        }
        for (p, v) in parts.iter().zip(&values) {
            first.same_tape(p, "concat")?;
            let s = v.shape();
            if s.len() != base.len() || s[..axis] != base[..axis] || s[axis + 1..] != base[axis + 1..] {
                return Err(Error::shape("concat", format!("{base:?} vs {s:?}")));
            }
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let lens: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let total: usize = lens.iter().sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &len) in values.iter().zip(&lens) {
                data.extend_from_slice(&v.data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
        let op = Op::Concat { parts: ids.iter().copied().zip(lens).collect(), outer, inner };
        first.finish("concat", &shape, data, op, &ids)
    }

    /// Takes `len` entries starting at `start` along `axis`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t, E>> {
        let a = self.value();
        let shape = a.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::shape("slice", format!("[{start}; {len}] on axis {axis} of {shape:?}")));
        }
        let (outer, len_in, inner) = split_axis(shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * len_in + start) * inner;
            data.extend_from_slice(&a.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        self.finish("slice", &out_shape, data, Op::Slice { a: self.id, outer, len_in, start, len, inner }, &[self.id])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, E>> {
        let a = self.value();
        if shape.iter().product::<usize>() != a.numel() {
            return Err(Error::shape("reshape", format!("{:?} -> {shape:?}", a.shape())));
        }
        self.finish("reshape", shape, a.data().to_vec(), Op::Reshape(self.id), &[self.id])
    }

    /// Mean squared error against `target` (same shape).
    pub fn mse(&self, target: &Var<'t, E>) -> Result<Var<'t, E>> {
        self.sub(target)?.square()?.mean()
    }
}
