//! Wengert tape: forward ops append nodes, `backward` replays them in reverse.

use crate::error::{Error, Result};
use crate::params::{Gradients, ParamId, ParamStore};
use crate::scalar::Scalar;

use super::kernels::{gemm_nt, gemm_tn};
use super::Tensor;

/// Handle to a node on a [`Tape`]. Only meaningful for the tape that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

pub(crate) enum Value<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

pub(crate) enum Op<T> {
    Leaf,
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, factor: T },
    Sigmoid { a: Var },
    Relu { a: Var },
    Log { a: Var },
    MatMul { a: Var, b: Var },
    Transpose { a: Var },
    Reshape { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Embedding { table: Var, rows: Vec<usize> },
    GatherTokens { x: Var, null: Var, layout: Vec<Option<usize>> },
    SumAxis { a: Var, axis: usize },
    MaxAxis { a: Var, axis: usize, argmax: Vec<usize> },
    Concat { parts: Vec<Var> },
    MaskedSoftmax { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    Bce { p: Var, labels: Vec<T>, eps: T },
}

pub(crate) struct Node<T> {
    pub(crate) value: Value<T>,
    pub(crate) op: Op<T>,
    pub(crate) requires_grad: bool,
}

/// Records one forward pass. Parameters are borrowed from a [`ParamStore`]
/// without copying; each parameter maps to a single leaf node.
pub struct Tape<'p, T: Scalar> {
    pub(crate) nodes: Vec<Node<T>>,
    params: Option<&'p ParamStore<T>>,
    param_vars: Vec<Option<Var>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Default for Tape<'static, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<'static, T> {
    /// A tape without a parameter store; use [`Tape::leaf`] for inputs.
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), params: None, param_vars: Vec::new(), grads: Vec::new() }
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Tape { nodes: Vec::new(), params: Some(params), param_vars: vec![None; params.len()], grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Input tensor. Gradient is recorded for it when `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Non-differentiable input such as a mask or a label vector.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Leaf node for a stored parameter; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        let store = self.params.ok_or_else(|| Error::Contract("tape has no parameter store".into()))?;
        if id.0 >= store.len() {
            return Err(Error::Contract(format!("unknown parameter index {}", id.0)));
        }
        if let Some(v) = self.param_vars[id.0] {
            return Ok(v);
        }
        let trainable = store.get(id).trainable;
        self.nodes.push(Node { value: Value::Param(id), op: Op::Leaf, requires_grad: trainable });
        let v = Var(self.nodes.len() - 1);
        self.param_vars[id.0] = Some(v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.expect("param node implies a store").value(*id),
        }
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every parameter node, indexed by [`ParamId`].
    pub fn param_grads(&self) -> Gradients<T> {
        let grads = self.param_vars.iter().map(|v| v.and_then(|v| self.grad(v).map(|g| g.to_vec()))).collect();
        Gradients::new(grads)
    }

    pub(crate) fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(Error::Contract(format!("var {} is not on this tape", v.0)))
        }
    }

    pub(crate) fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Reverse sweep from a scalar root. Gradients accumulate additively over
    /// fan-out; each node is visited once, in reverse tape order.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        self.check(root)?;
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!("backward root must be scalar, got shape {:?}", self.shape(root))));
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::with_capacity(self.nodes.len());
        grads.resize_with(self.nodes.len(), || None);
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop(i, &g, &mut grads);
            }
            grads[i] = Some(g);
        }
        // keep only grads of nodes that asked for them
        for (g, node) in grads.iter_mut().zip(&self.nodes) {
            if !node.requires_grad {
                *g = None;
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn grad_slot<'g>(&self, grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut [T]> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.value(v).len();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]).as_mut_slice())
    }

    fn backprop(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        macro_rules! with_grad {
            ($v:expr, |$gv:ident| $body:block) => {
                if let Some($gv) = self.grad_slot(grads, $v) {
                    $body
                }
            };
        }

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add { a, b } | Op::Sub { a, b } => {
                let neg = matches!(self.nodes[i].op, Op::Sub { .. });
                with_grad!(*a, |ga| {
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                });
                with_grad!(*b, |gb| {
                    let nb = gb.len();
                    for (k, &y) in g.iter().enumerate() {
                        if neg {
                            gb[k % nb] -= y;
                        } else {
                            gb[k % nb] += y;
                        }
                    }
                });
            }
            Op::Mul { a, b } => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                let nb = bv.len();
                with_grad!(*a, |ga| {
                    for (k, x) in ga.iter_mut().enumerate() {
                        *x += g[k] * bv[k % nb];
                    }
                });
                with_grad!(*b, |gb| {
                    for (k, &y) in g.iter().enumerate() {
                        gb[k % nb] += y * av[k];
                    }
                });
            }
            Op::Scale { a, factor } => {
                with_grad!(*a, |ga| {
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += y * *factor;
                    }
                });
            }
            Op::Sigmoid { a } => {
                let out = self.value(Var(i)).data();
                with_grad!(*a, |ga| {
                    for ((x, &y), &s) in ga.iter_mut().zip(g).zip(out) {
                        *x += y * s * (T::one() - s);
                    }
                });
            }
            Op::Relu { a } => {
                let inp = self.value(*a).data();
                with_grad!(*a, |ga| {
                    for ((x, &y), &v) in ga.iter_mut().zip(g).zip(inp) {
                        if v > T::zero() {
                            *x += y;
                        }
                    }
                });
            }
            Op::Log { a } => {
                let inp = self.value(*a).data();
                with_grad!(*a, |ga| {
                    for ((x, &y), &v) in ga.iter_mut().zip(g).zip(inp) {
                        *x += y / v;
                    }
                });
            }
            Op::MatMul { a, b } => {
                let at = self.value(*a);
                let bt = self.value(*b);
                let d = matmul_dims(at.shape(), bt.shape()).expect("validated in forward");
                let (p, q, r) = (d.p, d.q, d.r);
                let batch = d.batch_a.max(d.batch_b);
                with_grad!(*a, |ga| {
                    if d.batch_b == 1 {
                        // dA = dZ · Bᵀ with B shared across the batch
                        if d.batch_a == batch {
                            gemm_nt(g, bt.data(), ga, batch * p, r, q);
                        } else {
                            for t in 0..batch {
                                gemm_nt(&g[t * p * r..(t + 1) * p * r], bt.data(), ga, p, r, q);
                            }
                        }
                    } else {
                        for t in 0..batch {
                            let ta = if d.batch_a == 1 { 0 } else { t };
                            gemm_nt(
                                &g[t * p * r..(t + 1) * p * r],
                                &bt.data()[t * q * r..(t + 1) * q * r],
                                &mut ga[ta * p * q..(ta + 1) * p * q],
                                p,
                                r,
                                q,
                            );
                        }
                    }
                });
                with_grad!(*b, |gb| {
                    if d.batch_b == 1 && d.batch_a == batch {
                        // dB = Aᵀ · dZ summed over the batch
                        gemm_tn(at.data(), g, gb, batch * p, q, r);
                    } else {
                        for t in 0..batch {
                            let ta = if d.batch_a == 1 { 0 } else { t };
                            let tb = if d.batch_b == 1 { 0 } else { t };
                            gemm_tn(
                                &at.data()[ta * p * q..(ta + 1) * p * q],
                                &g[t * p * r..(t + 1) * p * r],
                                &mut gb[tb * q * r..(tb + 1) * q * r],
                                p,
                                q,
                                r,
                            );
                        }
                    }
                });
            }
            Op::Transpose { a } => {
                let s = self.shape(*a);
                let (p, q) = (s[s.len() - 2], s[s.len() - 1]);
                with_grad!(*a, |ga| {
                    let batch = ga.len() / (p * q);
                    for t in 0..batch {
                        let base = t * p * q;
                        // g is [.., q, p]
                        for x in 0..p {
                            for y in 0..q {
                                ga[base + x * q + y] += g[base + y * p + x];
                            }
                        }
                    }
                });
            }
            Op::Reshape { a } => {
                with_grad!(*a, |ga| {
                    for (x, &y) in ga.iter_mut().zip(g) {
                        *x += y;
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let gamma = self.value(*gain).data();
                let d = gamma.len();
                let rows = xhat.len() / d;
                with_grad!(*gain, |gg| {
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                });
                with_grad!(*bias, |gbias| {
                    for r in 0..rows {
                        for j in 0..d {
                            gbias[j] += g[r * d + j];
                        }
                    }
                });
                with_grad!(*x, |gx| {
                    let inv_d = T::one() / T::lit(d as f64);
                    let mut dxhat = vec![T::zero(); d];
                    for r in 0..rows {
                        let row = r * d..(r + 1) * d;
                        let xh = &xhat[row.clone()];
                        let gr = &g[row.clone()];
                        let mut mean_d = T::zero();
                        let mut mean_dx = T::zero();
                        for j in 0..d {
                            dxhat[j] = gr[j] * gamma[j];
                            mean_d += dxhat[j];
                            mean_dx += dxhat[j] * xh[j];
                        }
                        mean_d *= inv_d;
                        mean_dx *= inv_d;
                        let s = inv_std[r];
                        for (j, out) in gx[row].iter_mut().enumerate() {
                            *out += s * (dxhat[j] - mean_d - xh[j] * mean_dx);
                        }
                    }
                });
            }
            Op::Embedding { table, rows } => {
                let d = self.value(*table).last_dim();
                with_grad!(*table, |gt| {
                    for (t, &row) in rows.iter().enumerate() {
                        let src = &g[t * d..(t + 1) * d];
                        for (x, &y) in gt[row * d..(row + 1) * d].iter_mut().zip(src) {
                            *x += y;
                        }
                    }
                });
            }
            Op::GatherTokens { x, null, layout } => {
                let s = self.shape(*x);
                let (batch, n, d) = (s[0], s[1], s[2]);
                let len = layout.len();
                with_grad!(*x, |gx| {
                    for b in 0..batch {
                        for (t, src) in layout.iter().enumerate() {
                            if let Some(j) = src {
                                let from = &g[(b * len + t) * d..(b * len + t + 1) * d];
                                let to = &mut gx[(b * n + j) * d..(b * n + j + 1) * d];
                                for (u, &w) in to.iter_mut().zip(from) {
                                    *u += w;
                                }
                            }
                        }
                    }
                });
                with_grad!(*null, |gn| {
                    for b in 0..batch {
                        for (t, src) in layout.iter().enumerate() {
                            if src.is_none() {
                                let from = &g[(b * len + t) * d..(b * len + t + 1) * d];
                                for (u, &w) in gn.iter_mut().zip(from) {
                                    *u += w;
                                }
                            }
                        }
                    }
                });
            }
            Op::SumAxis { a, axis } => {
                let (outer, size, inner) = axis_split(self.shape(*a), *axis);
                with_grad!(*a, |ga| {
                    for o in 0..outer {
                        for s in 0..size {
                            for k in 0..inner {
                                ga[(o * size + s) * inner + k] += g[o * inner + k];
                            }
                        }
                    }
                });
            }
            Op::MaxAxis { a, axis, argmax } => {
                let (_, size, inner) = axis_split(self.shape(*a), *axis);
                with_grad!(*a, |ga| {
                    for (idx, &s) in argmax.iter().enumerate() {
                        let (o, k) = (idx / inner, idx % inner);
                        ga[(o * size + s) * inner + k] += g[idx];
                    }
                });
            }
            Op::Concat { parts } => {
                let widths: Vec<usize> = parts.iter().map(|&v| self.value(v).last_dim()).collect();
                let total: usize = widths.iter().sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for (&part, &w) in parts.iter().zip(&widths) {
                    with_grad!(part, |gp| {
                        for r in 0..rows {
                            for j in 0..w {
                                gp[r * w + j] += g[r * total + offset + j];
                            }
                        }
                    });
                    offset += w;
                }
            }
            Op::MaskedSoftmax { a } => {
                let out = self.value(Var(i)).data();
                let m = self.value(*a).last_dim();
                with_grad!(*a, |ga| {
                    for r in 0..out.len() / m {
                        let y = &out[r * m..(r + 1) * m];
                        let gr = &g[r * m..(r + 1) * m];
                        let dot: T = y.iter().zip(gr).map(|(&u, &v)| u * v).sum();
                        for j in 0..m {
                            ga[r * m + j] += y[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::Sum { a } => {
                with_grad!(*a, |ga| {
                    for x in ga.iter_mut() {
                        *x += g[0];
                    }
                });
            }
            Op::Mean { a } => {
                with_grad!(*a, |ga| {
                    let s = g[0] / T::lit(ga.len() as f64);
                    for x in ga.iter_mut() {
                        *x += s;
                    }
                });
            }
            Op::Bce { p, labels, eps } => {
                let pv = self.value(*p).data();
                let n = T::lit(pv.len() as f64);
                let hi = T::one() - *eps;
                with_grad!(*p, |gp| {
                    for ((x, &pr), &y) in gp.iter_mut().zip(pv).zip(labels) {
                        if pr < *eps || pr > hi {
                            continue;
                        }
                        let d = -y / pr + (T::one() - y) / (T::one() - pr);
                        *x += g[0] * d / n;
                    }
                });
            }
        }
    }
}

/// Extents of a matmul `[.., p, q] · [.., q, r]` after batch flattening.
#[derive(Clone, Copy, Debug)]
pub(crate) struct MatDims {
    pub batch_a: usize,
    pub batch_b: usize,
    pub p: usize,
    pub q: usize,
    pub r: usize,
}

pub(crate) fn matmul_dims(a: &[usize], b: &[usize]) -> Result<MatDims> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", format!("operands must have rank >= 2, got {a:?} and {b:?}")));
    }
    let (p, q) = (a[a.len() - 2], a[a.len() - 1]);
    let (q2, r) = (b[b.len() - 2], b[b.len() - 1]);
    if q != q2 {
        return Err(Error::shape("matmul", format!("inner dimensions differ: {a:?} · {b:?}")));
    }
    let lead_a = &a[..a.len() - 2];
    let lead_b = &b[..b.len() - 2];
    let batch_a: usize = lead_a.iter().product();
    let batch_b: usize = lead_b.iter().product();
    if lead_a != lead_b && batch_a != 1 && batch_b != 1 {
        return Err(Error::shape("matmul", format!("batch dimensions differ: {a:?} · {b:?}")));
    }
    Ok(MatDims { batch_a, batch_b, p, q, r })
}

/// `(outer, size, inner)` around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}
