//! Primitive tensor ops: forward builders and their backward rules.
//!
//! Conventions: shapes are row-major; binary ops broadcast right-aligned
//! (a trailing dimension may be missing or 1 on either side); reductions
//! accumulate in `f64` regardless of element type so results are stable and
//! insensitive to batch size quirks.

use super::gemm;
use super::math;
use super::tape::{acc_slot, Tape, Var};
use super::tensor::TensorData;
use super::Real;
use crate::error::{Error, Result};

pub(super) enum Op<T: Real> {
    Leaf,
    Matmul { a: usize, b: usize, batch: usize, m: usize, k: usize, n: usize, b_shared: bool },
    Add { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { x: usize, c: f64 },
    MaskAdd { x: usize },
    Embedding { table: usize, ids: Vec<u32> },
    LayerNorm { x: usize, gain: usize, bias: usize, xhat: Vec<T>, inv_std: Vec<T> },
    Softmax { x: usize },
    Gelu { x: usize },
    Reshape { x: usize },
    Transpose { x: usize, ax0: usize, ax1: usize },
    SliceAxis { x: usize, axis: usize, start: usize },
    Concat { xs: Vec<usize>, axis: usize },
    CrossEntropy { logits: usize, targets: Vec<u32>, probs: Vec<T> },
    SumAxis { x: usize, axis: usize },
    MeanAll { x: usize },
    Softplus { x: usize },
}

// ---------------------------------------------------------------------------
// Broadcasting helpers.

fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0usize; rank];
    for i in 0..rank {
        let da = if i >= rank - a.len() { a[i - (rank - a.len())] } else { 1 };
        let db = if i >= rank - b.len() { b[i - (rank - b.len())] } else { 1 };
        out[i] = if da == db || db == 1 {
            da
        } else if da == 1 {
            db
        } else {
            return Err(Error::shape(op, format!("cannot broadcast {a:?} with {b:?}")));
        };
    }
    Ok(out)
}

/// Row-major strides, with zeros on broadcast (size-1 or missing) dims,
/// aligned to the right against `out`.
fn bcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let off = out.len() - shape.len();
    let mut natural = vec![0usize; shape.len()];
    let mut acc = 1usize;
    for i in (0..shape.len()).rev() {
        natural[i] = acc;
        acc *= shape[i];
    }
    (0..out.len())
        .map(|i| {
            if i < off || (shape[i - off] == 1 && out[i] != 1) {
                0
            } else {
                natural[i - off]
            }
        })
        .collect()
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

/// out[i] = f(a[...], b[...]) under broadcasting. Fast paths cover the two
/// layouts the model actually uses (equal shapes, suffix operand).
fn bcast_forward<T: Real>(
    a: &TensorData<T>,
    b: &TensorData<T>,
    out_shape: &[usize],
    f: impl Fn(T, T) -> T,
) -> TensorData<T> {
    let numel: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(numel);
    let (ad, bd) = (a.data(), b.data());
    if a.shape() == b.shape() {
        out.extend(ad.iter().zip(bd).map(|(&x, &y)| f(x, y)));
    } else if is_suffix(b.shape(), a.shape()) && a.numel() == numel {
        let chunk = b.numel().max(1);
        for block in ad.chunks_exact(chunk) {
            out.extend(block.iter().zip(bd).map(|(&x, &y)| f(x, y)));
        }
    } else if is_suffix(a.shape(), b.shape()) && b.numel() == numel {
        let chunk = a.numel().max(1);
        for block in bd.chunks_exact(chunk) {
            out.extend(block.iter().zip(ad).map(|(&y, &x)| f(x, y)));
        }
    } else {
        let sa = bcast_strides(a.shape(), out_shape);
        let sb = bcast_strides(b.shape(), out_shape);
        let mut ostr = vec![1usize; out_shape.len()];
        for i in (0..out_shape.len().saturating_sub(1)).rev() {
            ostr[i] = ostr[i + 1] * out_shape[i + 1];
        }
        for flat in 0..numel {
            let (mut rem, mut ia, mut ib) = (flat, 0usize, 0usize);
            for d in 0..out_shape.len() {
                let c = rem / ostr[d];
                rem %= ostr[d];
                ia += c * sa[d];
                ib += c * sb[d];
            }
            out.push(f(ad[ia], bd[ib]));
        }
    }
    TensorData::new(out, out_shape).expect("broadcast output shape")
}

/// grad[input] += reduce(contrib) over the dims `in_shape` was broadcast
/// along. `contrib` has shape `out_shape`.
fn bcast_reduce_into<T: Real>(
    slot: &mut [T],
    in_shape: &[usize],
    contrib: &[T],
    out_shape: &[usize],
) {
    let in_numel: usize = in_shape.iter().product();
    if in_numel == contrib.len() {
        for (g, &c) in slot.iter_mut().zip(contrib) {
            *g += c;
        }
    } else if is_suffix(in_shape, out_shape) {
        let chunk = in_numel.max(1);
        for block in contrib.chunks_exact(chunk) {
            for (g, &c) in slot.iter_mut().zip(block) {
                *g += c;
            }
        }
    } else {
        let si = bcast_strides(in_shape, out_shape);
        let mut ostr = vec![1usize; out_shape.len()];
        for i in (0..out_shape.len().saturating_sub(1)).rev() {
            ostr[i] = ostr[i + 1] * out_shape[i + 1];
        }
        for (flat, &c) in contrib.iter().enumerate() {
            let (mut rem, mut ii) = (flat, 0usize);
            for d in 0..out_shape.len() {
                let q = rem / ostr[d];
                rem %= ostr[d];
                ii += q * si[d];
            }
            slot[ii] += c;
        }
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer: usize = shape[..axis].iter().product();
    let mid = shape[axis];
    let inner: usize = shape[axis + 1..].iter().product();
    (outer, mid, inner)
}

// ---------------------------------------------------------------------------
// Forward builders.

impl<T: Real> Tape<T> {
    fn req2(&self, a: Var, b: Var) -> bool {
        self.requires_grad(a) || self.requires_grad(b)
    }

    /// Matrix product. Accepted shapes: `[m,k]x[k,n]`, `[b,m,k]x[k,n]`
    /// (shared right operand), `[b,m,k]x[b,k,n]`, and `[b,h,m,k]x[b,h,k,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, n, b_shared, out_shape): (usize, usize, usize, usize, bool, Vec<usize>) =
            match (sa.len(), sb.len()) {
                (2, 2) => (1, sa[0], sa[1], sb[1], true, vec![sa[0], sb[1]]),
                (3, 2) => (sa[0], sa[1], sa[2], sb[1], true, vec![sa[0], sa[1], sb[1]]),
                (3, 3) if sa[0] == sb[0] => {
                    (sa[0], sa[1], sa[2], sb[2], false, vec![sa[0], sa[1], sb[2]])
                }
                (4, 4) if sa[0] == sb[0] && sa[1] == sb[1] => (
                    sa[0] * sa[1],
                    sa[2],
                    sa[3],
                    sb[3],
                    false,
                    vec![sa[0], sa[1], sa[2], sb[3]],
                ),
                _ => {
                    return Err(Error::shape(
                        "matmul",
                        format!("unsupported operand ranks {sa:?} x {sb:?}"),
                    ))
                }
            };
        let k_b = sb[sb.len() - 2];
        if k != k_b {
            return Err(Error::shape(
                "matmul",
                format!("inner dims disagree: {sa:?} x {sb:?}"),
            ));
        }
        let mut out = vec![T::zero(); batch * m * n];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            if b_shared {
                gemm::nn_acc(ad, bd, &mut out, batch * m, k, n);
            } else {
                for i in 0..batch {
                    gemm::nn_acc(
                        &ad[i * m * k..(i + 1) * m * k],
                        &bd[i * k * n..(i + 1) * k * n],
                        &mut out[i * m * n..(i + 1) * m * n],
                        m,
                        k,
                        n,
                    );
                }
            }
        }
        let req = self.req2(a, b);
        Ok(self.push(
            TensorData::new(out, &out_shape)?,
            req,
            Op::Matmul { a: a.0, b: b.0, batch, m, k, n, b_shared },
        ))
    }

    /// Elementwise sum with broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out_shape = broadcast_shape("add", self.shape(a), self.shape(b))?;
        let out = bcast_forward(self.value(a), self.value(b), &out_shape, |x, y| x + y);
        let req = self.req2(a, b);
        Ok(self.push(out, req, Op::Add { a: a.0, b: b.0 }))
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out_shape = broadcast_shape("mul", self.shape(a), self.shape(b))?;
        let out = bcast_forward(self.value(a), self.value(b), &out_shape, |x, y| x * y);
        let req = self.req2(a, b);
        Ok(self.push(out, req, Op::Mul { a: a.0, b: b.0 }))
    }

    /// Multiplication by a compile-time-known scalar.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let cv = T::from_f64(c);
        let data: Vec<T> = self.value(x).data().iter().map(|&v| v * cv).collect();
        let value = TensorData::new(data, self.shape(x)).expect("scale preserves shape");
        let req = self.requires_grad(x);
        self.push(value, req, Op::Scale { x: x.0, c })
    }

    /// `a - b`, composed from `scale` and `add`.
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.scale(b, -1.0);
        self.add(a, nb)
    }

    /// Adds a non-differentiable mask (e.g. causal `-1e9` entries) to `x`.
    pub fn mask_add(&mut self, x: Var, mask: Var) -> Result<Var> {
        if self.requires_grad(mask) {
            return Err(Error::InvalidArgument(
                "mask_add mask must be a constant".into(),
            ));
        }
        let out_shape = broadcast_shape("mask_add", self.shape(x), self.shape(mask))?;
        if out_shape != self.shape(x) {
            return Err(Error::shape(
                "mask_add",
                format!(
                    "mask {:?} may not broadcast x {:?} up",
                    self.shape(mask),
                    self.shape(x)
                ),
            ));
        }
        let out = bcast_forward(self.value(x), self.value(mask), &out_shape, |a, b| a + b);
        let req = self.requires_grad(x);
        Ok(self.push(out, req, Op::MaskAdd { x: x.0 }))
    }

    /// Gathers rows of `table` (`[vocab, dim]`) by id; output shape is
    /// `ids_shape + [dim]`.
    pub fn embedding_lookup(&mut self, table: Var, ids: &[u32], ids_shape: &[usize]) -> Result<Var> {
        let tshape = self.shape(table);
        if tshape.len() != 2 {
            return Err(Error::shape(
                "embedding_lookup",
                format!("table must be 2-d, got {tshape:?}"),
            ));
        }
        let (vocab, dim) = (tshape[0], tshape[1]);
        let count: usize = ids_shape.iter().product();
        if count != ids.len() {
            return Err(Error::shape(
                "embedding_lookup",
                format!("{} ids do not fill shape {ids_shape:?}", ids.len()),
            ));
        }
        let mut out = Vec::with_capacity(ids.len() * dim);
        {
            let td = self.value(table).data();
            for &id in ids {
                let id = id as usize;
                if id >= vocab {
                    return Err(Error::InvalidArgument(format!(
                        "embedding id {id} out of range for vocab {vocab}"
                    )));
                }
                out.extend_from_slice(&td[id * dim..(id + 1) * dim]);
            }
        }
        let mut out_shape = ids_shape.to_vec();
        out_shape.push(dim);
        let req = self.requires_grad(table);
        Ok(self.push(
            TensorData::new(out, &out_shape)?,
            req,
            Op::Embedding { table: table.0, ids: ids.to_vec() },
        ))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    /// Normalization uses the biased variance and `eps` inside the sqrt.
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let dim = *shape.last().ok_or_else(|| Error::shape("layernorm", "rank-0 input"))?;
        for (name, v) in [("gain", gain), ("bias", bias)] {
            if self.shape(v) != [dim] {
                return Err(Error::shape(
                    "layernorm",
                    format!("{name} shape {:?} != [{dim}]", self.shape(v)),
                ));
            }
        }
        let rows = self.value(x).numel() / dim;
        let mut out = vec![T::zero(); rows * dim];
        let mut xhat = vec![T::zero(); rows * dim];
        let mut inv_std = vec![T::zero(); rows];
        {
            let xd = self.value(x).data();
            let gd = self.value(gain).data();
            let bd = self.value(bias).data();
            for r in 0..rows {
                let row = &xd[r * dim..(r + 1) * dim];
                let mut mean = 0.0f64;
                for &v in row {
                    mean += v.to_f64();
                }
                mean /= dim as f64;
                let mut var = 0.0f64;
                for &v in row {
                    let d = v.to_f64() - mean;
                    var += d * d;
                }
                var /= dim as f64;
                let istd = 1.0 / (var + eps).sqrt();
                inv_std[r] = T::from_f64(istd);
                for i in 0..dim {
                    let xh = T::from_f64((row[i].to_f64() - mean) * istd);
                    xhat[r * dim + i] = xh;
                    out[r * dim + i] = xh * gd[i] + bd[i];
                }
            }
        }
        let req = self.requires_grad(x) || self.req2(gain, bias);
        Ok(self.push(
            TensorData::new(out, &shape)?,
            req,
            Op::LayerNorm { x: x.0, gain: gain.0, bias: bias.0, xhat, inv_std },
        ))
    }

    /// Softmax over the last axis (numerically stabilized).
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let dim = *shape.last().ok_or_else(|| Error::shape("softmax", "rank-0 input"))?;
        let mut out = Vec::with_capacity(self.value(x).numel());
        {
            let xd = self.value(x).data();
            for row in xd.chunks_exact(dim) {
                let mut mx = row[0];
                for &v in row {
                    if v > mx {
                        mx = v;
                    }
                }
                let mut denom = 0.0f64;
                let start = out.len();
                for &v in row {
                    let e = (v - mx).to_f64().exp();
                    denom += e;
                    out.push(e);
                }
                for e in &mut out[start..] {
                    *e /= denom;
                }
            }
        }
        let out: Vec<T> = out.into_iter().map(T::from_f64).collect();
        let req = self.requires_grad(x);
        Ok(self.push(TensorData::new(out, &shape)?, req, Op::Softmax { x: x.0 }))
    }

    /// GELU activation (tanh form).
    pub fn gelu(&mut self, x: Var) -> Var {
        let data: Vec<T> = self.value(x).data().iter().map(|&v| math::gelu(v)).collect();
        let value = TensorData::new(data, self.shape(x)).expect("gelu preserves shape");
        let req = self.requires_grad(x);
        self.push(value, req, Op::Gelu { x: x.0 })
    }

    /// Elementwise `ln(1 + e^x)`, numerically stable.
    pub fn softplus(&mut self, x: Var) -> Var {
        let data: Vec<T> = self.value(x).data().iter().map(|&v| math::softplus(v)).collect();
        let value = TensorData::new(data, self.shape(x)).expect("softplus preserves shape");
        let req = self.requires_grad(x);
        self.push(value, req, Op::Softplus { x: x.0 })
    }

    /// Same data, new shape (element count must match).
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshaped(shape).map_err(|_| {
            Error::shape(
                "reshape",
                format!("{:?} cannot view as {shape:?}", self.shape(x)),
            )
        })?;
        let req = self.requires_grad(x);
        Ok(self.push(value, req, Op::Reshape { x: x.0 }))
    }

    /// Swaps two axes.
    pub fn transpose(&mut self, x: Var, ax0: usize, ax1: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if ax0 >= shape.len() || ax1 >= shape.len() {
            return Err(Error::shape(
                "transpose",
                format!("axes ({ax0},{ax1}) out of range for {shape:?}"),
            ));
        }
        let (lo, hi) = (ax0.min(ax1), ax0.max(ax1));
        let mut out_shape = shape.clone();
        out_shape.swap(lo, hi);
        let value = if lo == hi {
            self.value(x).clone()
        } else {
            let (outer, d0, mid, d1, inner) = (
                shape[..lo].iter().product::<usize>(),
                shape[lo],
                shape[lo + 1..hi].iter().product::<usize>(),
                shape[hi],
                shape[hi + 1..].iter().product::<usize>(),
            );
            let xd = self.value(x).data();
            let mut out = vec![T::zero(); xd.len()];
            // out[o, j, m, i, s] = x[o, i, m, j, s]
            for o in 0..outer {
                for j in 0..d1 {
                    for m in 0..mid {
                        for i in 0..d0 {
                            let src = (((o * d0 + i) * mid + m) * d1 + j) * inner;
                            let dst = (((o * d1 + j) * mid + m) * d0 + i) * inner;
                            out[dst..dst + inner].copy_from_slice(&xd[src..src + inner]);
                        }
                    }
                }
            }
            TensorData::new(out, &out_shape)?
        };
        let req = self.requires_grad(x);
        Ok(self.push(value, req, Op::Transpose { x: x.0, ax0: lo, ax1: hi }))
    }

    /// Contiguous range along one axis.
    pub fn slice_axis(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::shape(
                "slice_axis",
                format!("slice [{start}, {start}+{len}) on axis {axis} of {shape:?}"),
            ));
        }
        let (outer, mid, inner) = axis_split(&shape, axis);
        let mut out = Vec::with_capacity(outer * len * inner);
        {
            let xd = self.value(x).data();
            for o in 0..outer {
                let base = (o * mid + start) * inner;
                out.extend_from_slice(&xd[base..base + len * inner]);
            }
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let req = self.requires_grad(x);
        Ok(self.push(
            TensorData::new(out, &out_shape)?,
            req,
            Op::SliceAxis { x: x.0, axis, start },
        ))
    }

    /// Concatenates along one axis; all other dims must agree.
    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        if xs.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let first = self.shape(xs[0]).to_vec();
        if axis >= first.len() {
            return Err(Error::shape(
                "concat",
                format!("axis {axis} out of range for {first:?}"),
            ));
        }
        let mut total = 0usize;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len()
                || s.iter().zip(&first).enumerate().any(|(d, (a, b))| d != axis && a != b)
            {
                return Err(Error::shape(
                    "concat",
                    format!("shape {s:?} incompatible with {first:?} on axis {axis}"),
                ));
            }
            total += s[axis];
        }
        let mut out_shape = first.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in xs {
                let mid = self.shape(v)[axis];
                let xd = self.value(v).data();
                out.extend_from_slice(&xd[o * mid * inner..(o + 1) * mid * inner]);
            }
        }
        let req = xs.iter().any(|&v| self.requires_grad(v));
        Ok(self.push(
            TensorData::new(out, &out_shape)?,
            req,
            Op::Concat { xs: xs.iter().map(|v| v.0).collect(), axis },
        ))
    }

    /// Per-row negative log-likelihood from raw logits: `[rows, vocab]` and
    /// one target id per row give a `[rows]` loss vector.
    pub fn cross_entropy_with_logits(&mut self, logits: Var, targets: &[u32]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        if shape.len() != 2 {
            return Err(Error::shape(
                "cross_entropy_with_logits",
                format!("logits must be [rows, vocab], got {shape:?}"),
            ));
        }
        let (rows, vocab) = (shape[0], shape[1]);
        if targets.len() != rows {
            return Err(Error::shape(
                "cross_entropy_with_logits",
                format!("{} targets for {rows} rows", targets.len()),
            ));
        }
        let mut out = Vec::with_capacity(rows);
        let mut probs = vec![T::zero(); rows * vocab];
        {
            let xd = self.value(logits).data();
            for (r, (&t, row)) in targets.iter().zip(xd.chunks_exact(vocab)).enumerate() {
                let t = t as usize;
                if t >= vocab {
                    return Err(Error::InvalidArgument(format!(
                        "target {t} out of range for vocab {vocab}"
                    )));
                }
                let mut mx = row[0];
                for &v in row {
                    if v > mx {
                        mx = v;
                    }
                }
                let mut denom = 0.0f64;
                for (i, &v) in row.iter().enumerate() {
                    let e = (v - mx).to_f64().exp();
                    probs[r * vocab + i] = T::from_f64(e);
                    denom += e;
                }
                for p in &mut probs[r * vocab..(r + 1) * vocab] {
                    *p = T::from_f64(p.to_f64() / denom);
                }
                let lse = mx.to_f64() + denom.ln();
                out.push(T::from_f64(lse - row[t].to_f64()));
            }
        }
        let req = self.requires_grad(logits);
        Ok(self.push(
            TensorData::new(out, &[rows])?,
            req,
            Op::CrossEntropy { logits: logits.0, targets: targets.to_vec(), probs },
        ))
    }

    /// Sum along one axis (axis removed from the shape).
    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::shape(
                "sum_axis",
                format!("axis {axis} out of range for {shape:?}"),
            ));
        }
        let (outer, mid, inner) = axis_split(&shape, axis);
        let mut out = vec![T::zero(); outer * inner];
        {
            let xd = self.value(x).data();
            for o in 0..outer {
                for i in 0..inner {
                    let mut s = 0.0f64;
                    for m in 0..mid {
                        s += xd[(o * mid + m) * inner + i].to_f64();
                    }
                    out[o * inner + i] = T::from_f64(s);
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let req = self.requires_grad(x);
        Ok(self.push(
            TensorData::new(out, &out_shape)?,
            req,
            Op::SumAxis { x: x.0, axis },
        ))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        let numel = self.value(x).numel();
        if numel == 0 {
            return Err(Error::shape("mean_all", "empty tensor"));
        }
        let mut s = 0.0f64;
        for &v in self.value(x).data() {
            s += v.to_f64();
        }
        let value = TensorData::scalar(T::from_f64(s / numel as f64));
        let req = self.requires_grad(x);
        Ok(self.push(value, req, Op::MeanAll { x: x.0 }))
    }
}

// ---------------------------------------------------------------------------
// Backward rules.

pub(super) fn backward_op<T: Real>(
    tape: &Tape<T>,
    idx: usize,
    g: &TensorData<T>,
    grads: &mut [Option<TensorData<T>>],
) -> Result<()> {
    let nodes = &tape.nodes;
    match &nodes[idx].op {
        Op::Leaf => {}
        Op::Matmul { a, b, batch, m, k, n, b_shared } => {
            let (batch, m, k, n) = (*batch, *m, *k, *n);
            let gd = g.data();
            let (ad, bd) = (nodes[*a].value.data(), nodes[*b].value.data());
            if nodes[*a].requires_grad {
                let da = acc_slot(grads, *a, nodes[*a].value.shape());
                if *b_shared {
                    gemm::nt_acc(gd, bd, da, batch * m, n, k);
                } else {
                    for i in 0..batch {
                        gemm::nt_acc(
                            &gd[i * m * n..(i + 1) * m * n],
                            &bd[i * k * n..(i + 1) * k * n],
                            &mut da[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                }
            }
            if nodes[*b].requires_grad {
                let db = acc_slot(grads, *b, nodes[*b].value.shape());
                if *b_shared {
                    gemm::tn_acc(ad, gd, db, batch * m, k, n);
                } else {
                    for i in 0..batch {
                        gemm::tn_acc(
                            &ad[i * m * k..(i + 1) * m * k],
                            &gd[i * m * n..(i + 1) * m * n],
                            &mut db[i * k * n..(i + 1) * k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
        }
        Op::Add { a, b } => {
            for &input in &[*a, *b] {
                if nodes[input].requires_grad {
                    let shape = nodes[input].value.shape().to_vec();
                    let slot = acc_slot(grads, input, &shape);
                    bcast_reduce_into(slot, &shape, g.data(), g.shape());
                }
            }
        }
        Op::Mul { a, b } => {
            for (input, other) in [(*a, *b), (*b, *a)] {
                if nodes[input].requires_grad {
                    let contrib =
                        bcast_forward(g, &nodes[other].value, g.shape(), |gv, ov| gv * ov);
                    let shape = nodes[input].value.shape().to_vec();
                    let slot = acc_slot(grads, input, &shape);
                    bcast_reduce_into(slot, &shape, contrib.data(), g.shape());
                }
            }
        }
        Op::Scale { x, c } => {
            if nodes[*x].requires_grad {
                let cv = T::from_f64(*c);
                let slot = acc_slot(grads, *x, nodes[*x].value.shape());
                for (s, &gv) in slot.iter_mut().zip(g.data()) {
                    *s += gv * cv;
                }
            }
        }
        Op::MaskAdd { x } => {
            if nodes[*x].requires_grad {
                let slot = acc_slot(grads, *x, nodes[*x].value.shape());
                for (s, &gv) in slot.iter_mut().zip(g.data()) {
                    *s += gv;
                }
            }
        }
        Op::Embedding { table, ids } => {
            if nodes[*table].requires_grad {
                let dim = nodes[*table].value.shape()[1];
                let slot = acc_slot(grads, *table, nodes[*table].value.shape());
                for (row, &id) in ids.iter().enumerate() {
                    let src = &g.data()[row * dim..(row + 1) * dim];
                    let dst = &mut slot[id as usize * dim..(id as usize + 1) * dim];
                    for (d, &s) in dst.iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
        Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
            let dim = *nodes[*x].value.shape().last().expect("layernorm dim");
            let rows = nodes[*x].value.numel() / dim;
            let gd = g.data();
            if nodes[*gain].requires_grad {
                let slot = acc_slot(grads, *gain, &[dim]);
                for r in 0..rows {
                    for i in 0..dim {
                        slot[i] += gd[r * dim + i] * xhat[r * dim + i];
                    }
                }
            }
            if nodes[*bias].requires_grad {
                let slot = acc_slot(grads, *bias, &[dim]);
                for r in 0..rows {
                    for i in 0..dim {
                        slot[i] += gd[r * dim + i];
                    }
                }
            }
            if nodes[*x].requires_grad {
                let gw = nodes[*gain].value.data();
                let shape = nodes[*x].value.shape().to_vec();
                let slot = acc_slot(grads, *x, &shape);
                for r in 0..rows {
                    let mut mean_dxhat = 0.0f64;
                    let mut mean_dxhat_xhat = 0.0f64;
                    for i in 0..dim {
                        let dxh = (gd[r * dim + i] * gw[i]).to_f64();
                        mean_dxhat += dxh;
                        mean_dxhat_xhat += dxh * xhat[r * dim + i].to_f64();
                    }
                    mean_dxhat /= dim as f64;
                    mean_dxhat_xhat /= dim as f64;
                    let istd = inv_std[r].to_f64();
                    for i in 0..dim {
                        let dxh = (gd[r * dim + i] * gw[i]).to_f64();
                        let xh = xhat[r * dim + i].to_f64();
                        slot[r * dim + i] +=
                            T::from_f64(istd * (dxh - mean_dxhat - xh * mean_dxhat_xhat));
                    }
                }
            }
        }
        Op::Softmax { x } => {
            if nodes[*x].requires_grad {
                let y = nodes[idx].value.data();
                let dim = *nodes[idx].value.shape().last().expect("softmax dim");
                let gd = g.data();
                let shape = nodes[*x].value.shape().to_vec();
                let slot = acc_slot(grads, *x, &shape);
                for r in 0..y.len() / dim {
                    let ys = &y[r * dim..(r + 1) * dim];
                    let gs = &gd[r * dim..(r + 1) * dim];
                    let mut dot = 0.0f64;
                    for i in 0..dim {
                        dot += (gs[i] * ys[i]).to_f64();
                    }
                    let dot = T::from_f64(dot);
                    for i in 0..dim {
                        slot[r * dim + i] += ys[i] * (gs[i] - dot);
                    }
                }
            }
        }
        Op::Gelu { x } => {
            if nodes[*x].requires_grad {
                let xd = nodes[*x].value.data();
                let slot = acc_slot(grads, *x, nodes[*x].value.shape());
                for ((s, &gv), &xv) in slot.iter_mut().zip(g.data()).zip(xd) {
                    *s += gv * math::gelu_dx(xv);
                }
            }
        }
        Op::Softplus { x } => {
            if nodes[*x].requires_grad {
                let xd = nodes[*x].value.data();
                let slot = acc_slot(grads, *x, nodes[*x].value.shape());
                for ((s, &gv), &xv) in slot.iter_mut().zip(g.data()).zip(xd) {
                    *s += gv * math::sigmoid(xv);
                }
            }
        }
        Op::Reshape { x } => {
            if nodes[*x].requires_grad {
                let slot = acc_slot(grads, *x, nodes[*x].value.shape());
                for (s, &gv) in slot.iter_mut().zip(g.data()) {
                    *s += gv;
                }
            }
        }
        Op::Transpose { x, ax0, ax1 } => {
            if nodes[*x].requires_grad {
                let out_shape = nodes[idx].value.shape();
                let (lo, hi) = (*ax0, *ax1);
                if lo == hi {
                    let slot = acc_slot(grads, *x, nodes[*x].value.shape());
                    for (s, &gv) in slot.iter_mut().zip(g.data()) {
                        *s += gv;
                    }
                    return Ok(());
                }
                let (outer, d0, mid, d1, inner) = (
                    out_shape[..lo].iter().product::<usize>(),
                    out_shape[lo],
                    out_shape[lo + 1..hi].iter().product::<usize>(),
                    out_shape[hi],
                    out_shape[hi + 1..].iter().product::<usize>(),
                );
                let gd = g.data();
                let slot = acc_slot(grads, *x, nodes[*x].value.shape());
                for o in 0..outer {
                    for j in 0..d1 {
                        for m in 0..mid {
                            for i in 0..d0 {
                                let src = (((o * d0 + i) * mid + m) * d1 + j) * inner;
                                let dst = (((o * d1 + j) * mid + m) * d0 + i) * inner;
                                for t in 0..inner {
                                    slot[dst + t] += gd[src + t];
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::SliceAxis { x, axis, start } => {
            if nodes[*x].requires_grad {
                let in_shape = nodes[*x].value.shape().to_vec();
                let (outer, mid, inner) = axis_split(&in_shape, *axis);
                let len = nodes[idx].value.shape()[*axis];
                let gd = g.data();
                let slot = acc_slot(grads, *x, &in_shape);
                for o in 0..outer {
                    let dst = (o * mid + start) * inner;
                    let src = o * len * inner;
                    for t in 0..len * inner {
                        slot[dst + t] += gd[src + t];
                    }
                }
            }
        }
        Op::Concat { xs, axis } => {
            let out_shape = nodes[idx].value.shape().to_vec();
            let (outer, total, inner) = axis_split(&out_shape, *axis);
            let gd = g.data();
            let mut offset = 0usize;
            for &input in xs {
                let mid = nodes[input].value.shape()[*axis];
                if nodes[input].requires_grad {
                    let shape = nodes[input].value.shape().to_vec();
                    let slot = acc_slot(grads, input, &shape);
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * mid * inner;
                        for t in 0..mid * inner {
                            slot[dst + t] += gd[src + t];
                        }
                    }
                }
                offset += mid;
            }
        }
        Op::CrossEntropy { logits, targets, probs } => {
            if nodes[*logits].requires_grad {
                let vocab = nodes[*logits].value.shape()[1];
                let gd = g.data();
                let slot = acc_slot(grads, *logits, nodes[*logits].value.shape());
                for (r, &t) in targets.iter().enumerate() {
                    let gr = gd[r];
                    let row = &mut slot[r * vocab..(r + 1) * vocab];
                    let ps = &probs[r * vocab..(r + 1) * vocab];
                    for (i, (s, &p)) in row.iter_mut().zip(ps).enumerate() {
                        let indicator = if i == t as usize { T::one() } else { T::zero() };
                        *s += gr * (p - indicator);
                    }
                }
            }
        }
        Op::SumAxis { x, axis } => {
            if nodes[*x].requires_grad {
                let in_shape = nodes[*x].value.shape().to_vec();
                let (outer, mid, inner) = axis_split(&in_shape, *axis);
                let gd = g.data();
                let slot = acc_slot(grads, *x, &in_shape);
                for o in 0..outer {
                    for m in 0..mid {
                        for i in 0..inner {
                            slot[(o * mid + m) * inner + i] += gd[o * inner + i];
                        }
                    }
                }
            }
        }
        Op::MeanAll { x } => {
            if nodes[*x].requires_grad {
                let numel = nodes[*x].value.numel();
                let gv = g.data()[0] * T::from_f64(1.0 / numel as f64);
                let slot = acc_slot(grads, *x, nodes[*x].value.shape());
                for s in slot {
                    *s += gv;
                }
            }
        }
    }
    Ok(())
}
