//! Forward builders. Each validates shapes, computes the value, and records
//! the op with whatever it needs for the reverse sweep.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::kernels::gemm_nn;
use super::tape::{axis_split, matmul_dims, Op, Tape, Var};
use super::Tensor;

/// Broadcast rule for binary elementwise ops: `b` equals `a`'s shape, is a
/// trailing suffix of it (leading-batch broadcast), or holds a single value.
fn check_broadcast(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    let scalar = b.iter().product::<usize>() == 1;
    let suffix = b.len() <= a.len() && a[a.len() - b.len()..] == *b;
    if scalar || suffix {
        Ok(())
    } else {
        Err(Error::shape(op, format!("cannot broadcast {b:?} onto {a:?}")))
    }
}

impl<'p, T: Scalar> Tape<'p, T> {
    fn emit(&mut self, op_name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: op_name });
        }
        let rg = inputs.iter().any(|&v| self.requires_grad(v));
        Ok(self.push(value, op, rg))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (at, bt) = (self.value(a), self.value(b));
        check_broadcast(name, at.shape(), bt.shape())?;
        let nb = bt.len();
        let bd = bt.data();
        let data = at.data().iter().enumerate().map(|(k, &x)| f(x, bd[k % nb])).collect();
        let out = Tensor::new(at.shape().to_vec(), data)?;
        self.emit(name, out, op, &[a, b])
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        self.check(a)?;
        let at = self.value(a);
        let out = Tensor::new(at.shape().to_vec(), at.data().iter().map(|&x| f(x)).collect())?;
        self.emit(name, out, op, &[a])
    }

    /// `a + b`, with `b` broadcast over leading axes or as a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    /// Elementwise product, same broadcast rule as [`Tape::add`].
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        self.unary("scale", a, |x| x * factor, Op::Scale { a, factor })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid { a })
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| if x > T::zero() { x } else { T::zero() }, Op::Relu { a })
    }

    /// Natural log; every input must be strictly positive.
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        if let Some(bad) = self.value(a).data().iter().find(|&&x| !(x > T::zero())) {
            return Err(Error::Domain { op: "log", detail: format!("non-positive input {bad}") });
        }
        self.unary("log", a, |x| x.ln(), Op::Log { a })
    }

    /// `[.., p, q] · [.., q, r]`; batch axes must agree or one side has none.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (at, bt) = (self.value(a), self.value(b));
        let d = matmul_dims(at.shape(), bt.shape())?;
        let batch = d.batch_a.max(d.batch_b);
        let mut shape = if d.batch_a >= d.batch_b {
            at.shape()[..at.rank() - 2].to_vec()
        } else {
            bt.shape()[..bt.rank() - 2].to_vec()
        };
        shape.extend([d.p, d.r]);
        let (p, q, r) = (d.p, d.q, d.r);
        let mut out = vec![T::zero(); batch * p * r];
        if d.batch_b == 1 && d.batch_a == batch {
            gemm_nn(at.data(), bt.data(), &mut out, batch * p, q, r);
        } else {
            for t in 0..batch {
                let ta = if d.batch_a == 1 { 0 } else { t };
                let tb = if d.batch_b == 1 { 0 } else { t };
                gemm_nn(
                    &at.data()[ta * p * q..(ta + 1) * p * q],
                    &bt.data()[tb * q * r..(tb + 1) * q * r],
                    &mut out[t * p * r..(t + 1) * p * r],
                    p,
                    q,
                    r,
                );
            }
        }
        let out = Tensor::new(shape, out)?;
        self.emit("matmul", out, Op::MatMul { a, b }, &[a, b])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let at = self.value(a);
        let out = transpose_last_two(at)?;
        self.emit("transpose", out, Op::Transpose { a }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        self.check(a)?;
        let out = self.value(a).clone().reshape(shape)?;
        self.emit("reshape", out, Op::Reshape { a }, &[a])
    }

    /// Normalizes the last axis to zero mean and unit variance, then applies
    /// `gain` and `bias` (both of the last axis' length).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        self.check(x)?;
        self.check(gain)?;
        self.check(bias)?;
        let xt = self.value(x);
        let d = xt.last_dim();
        if self.value(gain).shape() != [d] || self.value(bias).shape() != [d] {
            return Err(Error::shape(
                "layer_norm",
                format!("gain {:?} / bias {:?} must be [{d}]", self.value(gain).shape(), self.value(bias).shape()),
            ));
        }
        if d == 1 && eps <= T::zero() {
            return Err(Error::Domain { op: "layer_norm", detail: "width 1 with eps = 0 divides by zero".into() });
        }
        if eps < T::zero() {
            return Err(Error::Domain { op: "layer_norm", detail: format!("negative eps {eps}") });
        }
        let rows = xt.len() / d;
        let gamma = self.value(gain).data();
        let beta = self.value(bias).data();
        let inv_d = T::one() / T::lit(d as f64);
        let mut xhat = vec![T::zero(); xt.len()];
        let mut inv_std = vec![T::zero(); rows];
        let mut out = vec![T::zero(); xt.len()];
        for r in 0..rows {
            let row = &xt.data()[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let s = T::one() / (var + eps).sqrt();
            inv_std[r] = s;
            for j in 0..d {
                let h = (row[j] - mean) * s;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gamma[j] + beta[j];
            }
        }
        let out = Tensor::new(xt.shape().to_vec(), out)?;
        self.emit("layer_norm", out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias])
    }

    /// Row lookup into a `[rows, d]` table; output shape is `out_shape ++ [d]`.
    pub fn embedding(&mut self, table: Var, rows: Vec<usize>, out_shape: &[usize]) -> Result<Var> {
        self.check(table)?;
        let tt = self.value(table);
        if tt.rank() != 2 {
            return Err(Error::shape("embedding", format!("table must be rank 2, got {:?}", tt.shape())));
        }
        let (n_rows, d) = (tt.shape()[0], tt.shape()[1]);
        if out_shape.iter().product::<usize>() != rows.len() {
            return Err(Error::shape("embedding", format!("{} ids do not fill {out_shape:?}", rows.len())));
        }
        let mut out = Vec::with_capacity(rows.len() * d);
        for &r in &rows {
            if r >= n_rows {
                return Err(Error::shape("embedding", format!("row {r} out of range for {n_rows} rows")));
            }
            out.extend_from_slice(&tt.data()[r * d..(r + 1) * d]);
        }
        let mut shape = out_shape.to_vec();
        shape.push(d);
        let out = Tensor::new(shape, out)?;
        self.emit("embedding", out, Op::Embedding { table, rows }, &[table])
    }

    /// Gathers tokens along axis 1 of `x: [batch, n, d]`. `layout[t] = Some(j)`
    /// takes token `j`; `None` inserts the `null: [d]` vector.
    pub fn gather_tokens(&mut self, x: Var, null: Var, layout: Vec<Option<usize>>) -> Result<Var> {
        self.check(x)?;
        self.check(null)?;
        let xt = self.value(x);
        if xt.rank() != 3 {
            return Err(Error::shape("gather_tokens", format!("expected [batch, n, d], got {:?}", xt.shape())));
        }
        let (batch, n, d) = (xt.shape()[0], xt.shape()[1], xt.shape()[2]);
        if self.value(null).shape() != [d] {
            return Err(Error::shape("gather_tokens", format!("null must be [{d}]")));
        }
        if layout.is_empty() || layout.iter().flatten().any(|&j| j >= n) {
            return Err(Error::shape("gather_tokens", format!("layout out of range for {n} tokens")));
        }
        let nv = self.value(null).data();
        let mut out = Vec::with_capacity(batch * layout.len() * d);
        for b in 0..batch {
            for src in &layout {
                match src {
                    Some(j) => out.extend_from_slice(&xt.data()[(b * n + j) * d..(b * n + j + 1) * d]),
                    None => out.extend_from_slice(nv),
                }
            }
        }
        let out = Tensor::new(vec![batch, layout.len(), d], out)?;
        self.emit("gather_tokens", out, Op::GatherTokens { x, null, layout }, &[x, null])
    }

    /// Sum over one axis, which is removed from the shape (rank-1 inputs give `[1]`).
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check(a)?;
        let at = self.value(a);
        if axis >= at.rank() {
            return Err(Error::shape("sum_axis", format!("axis {axis} for shape {:?}", at.shape())));
        }
        let (outer, size, inner) = axis_split(at.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for s in 0..size {
                for k in 0..inner {
                    out[o * inner + k] += at.data()[(o * size + s) * inner + k];
                }
            }
        }
        let out = Tensor::new(reduced_shape(at.shape(), axis), out)?;
        self.emit("sum_axis", out, Op::SumAxis { a, axis }, &[a])
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check(a)?;
        let n = *self
            .value(a)
            .shape()
            .get(axis)
            .ok_or_else(|| Error::shape("mean_axis", format!("axis {axis} out of range")))?;
        let s = self.sum_axis(a, axis)?;
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Max over one axis; ties resolve to the lowest index.
    pub fn max_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.check(a)?;
        let at = self.value(a);
        if axis >= at.rank() {
            return Err(Error::shape("max_axis", format!("axis {axis} for shape {:?}", at.shape())));
        }
        let (outer, size, inner) = axis_split(at.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        let mut argmax = vec![0; outer * inner];
        for o in 0..outer {
            for k in 0..inner {
                let mut best = 0;
                let mut bv = at.data()[o * size * inner + k];
                for s in 1..size {
                    let v = at.data()[(o * size + s) * inner + k];
                    if v > bv {
                        bv = v;
                        best = s;
                    }
                }
                out[o * inner + k] = bv;
                argmax[o * inner + k] = best;
            }
        }
        let out = Tensor::new(reduced_shape(at.shape(), axis), out)?;
        self.emit("max_axis", out, Op::MaxAxis { a, axis, argmax }, &[a])
    }

    /// Concatenation along the last axis; leading axes must match.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::shape("concat", "no operands"))?;
        for &p in parts {
            self.check(p)?;
        }
        let lead = self.shape(first)[..self.value(first).rank() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != *lead {
                return Err(Error::shape("concat", format!("leading axes {:?} vs {lead:?}", s)));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let out = Tensor::new(shape, out)?;
        self.emit("concat", out, Op::Concat { parts: parts.to_vec() }, parts)
    }

    /// Softmax over the last axis restricted to entries where `mask` is
    /// nonzero. Masked entries and fully masked rows produce zero.
    pub fn masked_softmax(&mut self, a: Var, mask: &Tensor<T>) -> Result<Var> {
        self.check(a)?;
        let at = self.value(a);
        if at.shape() != mask.shape() {
            return Err(Error::shape("masked_softmax", format!("mask {:?} vs scores {:?}", mask.shape(), at.shape())));
        }
        let m = at.last_dim();
        let mut out = vec![T::zero(); at.len()];
        for r in 0..at.len() / m {
            let row = &at.data()[r * m..(r + 1) * m];
            let mk = &mask.data()[r * m..(r + 1) * m];
            let mx =
                row.iter().zip(mk).filter(|(_, &k)| k != T::zero()).map(|(&v, _)| v).fold(T::neg_infinity(), T::max);
            if mx == T::neg_infinity() {
                continue;
            }
            let mut z = T::zero();
            for j in 0..m {
                if mk[j] != T::zero() {
                    let e = (row[j] - mx).exp();
                    out[r * m + j] = e;
                    z += e;
                }
            }
            for v in &mut out[r * m..(r + 1) * m] {
                *v /= z;
            }
        }
        let out = Tensor::new(at.shape().to_vec(), out)?;
        self.emit("masked_softmax", out, Op::MaskedSoftmax { a }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let s = self.value(a).data().iter().copied().sum();
        self.emit("sum", Tensor::scalar(s), Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.check(a)?;
        let at = self.value(a);
        let s = at.data().iter().copied().sum::<T>() / T::lit(at.len() as f64);
        self.emit("mean", Tensor::scalar(s), Op::Mean { a }, &[a])
    }

    /// Mean binary cross-entropy of probabilities `p` against 0/1 `labels`,
    /// with `p` clamped to `[eps, 1 - eps]`. Clamped entries get no gradient.
    pub fn binary_cross_entropy(&mut self, p: Var, labels: &[T], eps: T) -> Result<Var> {
        self.check(p)?;
        let pv = self.value(p).data();
        if pv.len() != labels.len() {
            return Err(Error::shape(
                "binary_cross_entropy",
                format!("{} predictions vs {} labels", pv.len(), labels.len()),
            ));
        }
        let loss = bce_mean(pv, labels, eps);
        self.emit("binary_cross_entropy", Tensor::scalar(loss), Op::Bce { p, labels: labels.to_vec(), eps }, &[p])
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `-mean(y ln p + (1 - y) ln(1 - p))` with `p` clamped to `[eps, 1 - eps]`.
pub(crate) fn bce_mean<T: Scalar>(p: &[T], labels: &[T], eps: T) -> T {
    let hi = T::one() - eps;
    let mut total = T::zero();
    for (&pr, &y) in p.iter().zip(labels) {
        let q = pr.max(eps).min(hi);
        total += y * q.ln() + (T::one() - y) * (T::one() - q).ln();
    }
    -total / T::lit(p.len() as f64)
}

pub(crate) fn transpose_last_two<T: Scalar>(at: &Tensor<T>) -> Result<Tensor<T>> {
    if at.rank() < 2 {
        return Err(Error::shape("transpose", format!("rank < 2: {:?}", at.shape())));
    }
    let s = at.shape();
    let (p, q) = (s[s.len() - 2], s[s.len() - 1]);
    let batch = at.len() / (p * q);
    let mut out = vec![T::zero(); at.len()];
    for t in 0..batch {
        let base = t * p * q;
        for x in 0..p {
            for y in 0..q {
                out[base + y * p + x] = at.data()[base + x * q + y];
            }
        }
    }
    let mut shape = s.to_vec();
    let r = shape.len();
    shape.swap(r - 2, r - 1);
    Tensor::new(shape, out)
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut s: Vec<usize> = shape.iter().enumerate().filter(|&(i, _)| i != axis).map(|(_, &d)| d).collect();
    if s.is_empty() {
        s.push(1);
    }
    s
}
