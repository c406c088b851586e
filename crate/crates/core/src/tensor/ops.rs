use super::dense::Tensor;
use super::scalar::{gemm, MatRef, Scalar};
use super::tape::{Conv1dSpec, Node, Op, Var};
use crate::error::{Error, Result};

pub(crate) const NORM_EPS: f64 = 1e-5;

fn shape_err(op: &str, detail: String) -> Error {
    Error::usage(format!("{op}: {detail}"))
}

impl<'t, T: Scalar> Var<'t, T> {
    fn derive(&self, inputs: &[Var<'t, T>], value: Tensor<T>, op: Op<T>) -> Var<'t, T> {
        let tracked = inputs.iter().any(|v| v.is_tracked());
        self.tape.push_node(value, op, tracked)
    }

    fn same_shape(&self, other: Var<'t, T>, op: &str) -> Result<(Tensor<T>, Tensor<T>)> {
        let (a, b) = (self.value(), other.value());
        if a.shape() != b.shape() {
            return Err(shape_err(op, format!("{:?} vs {:?}", a.shape(), b.shape())));
        }
        Ok((a, b))
    }

    fn zip_with(&self, other: Var<'t, T>, name: &str, f: impl Fn(T, T) -> T, op: Op<T>) -> Result<Var<'t, T>> {
        let (a, b) = self.same_shape(other, name)?;
        let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
        Ok(self.derive(&[*self, other], Tensor::from_parts(a.shape().to_vec(), data), op))
    }

    pub fn add(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.zip_with(other, "add", |x, y| x + y, Op::Add(self.id, other.id))
    }

    pub fn sub(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.zip_with(other, "sub", |x, y| x - y, Op::Sub(self.id, other.id))
    }

    pub fn mul(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.zip_with(other, "mul", |x, y| x * y, Op::Mul(self.id, other.id))
    }

    /// Adds `bias` (shape `[n]`) to every length-`n` row of `self`.
    pub fn add_bias(&self, bias: Var<'t, T>) -> Result<Var<'t, T>> {
        let (x, b) = (self.value(), bias.value());
        let n = b.len();
        if b.rank() != 1 || x.shape().last() != Some(&n) {
            return Err(shape_err("add_bias", format!("{:?} + {:?}", x.shape(), b.shape())));
        }
        let mut out = x.to_vec();
        for row in out.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.derive(&[*self, bias], value, Op::AddBias { x: self.id, bias: bias.id }))
    }

    pub fn scale(&self, s: T) -> Var<'t, T> {
        let value = self.value().map(|v| v * s);
        self.derive(&[*self], value, Op::Scale(self.id, s))
    }

    pub fn neg(&self) -> Var<'t, T> {
        self.scale(-T::one())
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&self) -> Var<'t, T> {
        let total = self.value().data().iter().copied().sum();
        self.derive(&[*self], Tensor::scalar(total), Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'t, T> {
        let n = self.value().len();
        self.sum().scale(T::one() / T::of(n as f64))
    }

    /// `[.., k] @ [k, n] -> [.., n]`.
    pub fn matmul(&self, w: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, wv) = (self.value(), w.value());
        if wv.rank() != 2 || a.rank() == 0 || a.shape()[a.rank() - 1] != wv.shape()[0] {
            return Err(shape_err("matmul", format!("{:?} @ {:?}", a.shape(), wv.shape())));
        }
        let (k, n) = (wv.shape()[0], wv.shape()[1]);
        let m = a.len() / k;
        let mut out = vec![T::zero(); m * n];
        gemm(MatRef::new(a.data(), m, k), MatRef::new(wv.data(), k, n), &mut out, T::zero());
        let mut shape = a.shape().to_vec();
        *shape.last_mut().unwrap() = n;
        Ok(self.derive(&[*self, w], Tensor::from_parts(shape, out), Op::MatMul { a: self.id, w: w.id }))
    }

    /// Batched product `[n, m, k] @ [n, k, p]`, or `@ [n, p, k]^T` when `trans_b`.
    pub fn bmm(&self, b: Var<'t, T>, trans_b: bool) -> Result<Var<'t, T>> {
        let (av, bv) = (self.value(), b.value());
        let bad = || shape_err("bmm", format!("{:?} @ {:?} (trans_b={trans_b})", av.shape(), bv.shape()));
        if av.rank() != 3 || bv.rank() != 3 || av.shape()[0] != bv.shape()[0] {
            return Err(bad());
        }
        let (nb, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
        let (bk, p) = if trans_b {
            (bv.shape()[2], bv.shape()[1])
        } else {
            (bv.shape()[1], bv.shape()[2])
        };
        if bk != k {
            return Err(bad());
        }
        let mut out = vec![T::zero(); nb * m * p];
        for i in 0..nb {
            let a_i = MatRef::new(&av.data()[i * m * k..(i + 1) * m * k], m, k);
            let b_slice = &bv.data()[i * k * p..(i + 1) * k * p];
            let b_i = if trans_b {
                MatRef::new(b_slice, p, k).t()
            } else {
                MatRef::new(b_slice, k, p)
            };
            gemm(a_i, b_i, &mut out[i * m * p..(i + 1) * m * p], T::zero());
        }
        let value = Tensor::from_parts(vec![nb, m, p], out);
        Ok(self.derive(&[*self, b], value, Op::Bmm { a: self.id, b: b.id, trans_b }))
    }

    /// Axis permutation: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let mut seen = vec![false; x.rank()];
        if perm.len() != x.rank() || perm.iter().any(|&p| p >= x.rank() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err("permute", format!("{perm:?} on {:?}", x.shape())));
        }
        let (shape, data) = permute_data(x.shape(), x.data(), perm);
        let value = Tensor::from_parts(shape, data);
        Ok(self.derive(&[*self], value, Op::Permute { x: self.id, perm: perm.to_vec() }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t, T>> {
        let value = self.value().reshape(shape.to_vec())?;
        Ok(self.derive(&[*self], value, Op::Reshape(self.id)))
    }

    /// Rows `start..start + len` of the leading axis.
    pub fn narrow0(&self, start: usize, len: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.rank() == 0 || start + len > x.shape()[0] {
            return Err(shape_err("narrow0", format!("{start}+{len} of {:?}", x.shape())));
        }
        let row = x.len() / x.shape()[0];
        let data = x.data()[start * row..(start + len) * row].to_vec();
        let mut shape = x.shape().to_vec();
        shape[0] = len;
        Ok(self.derive(&[*self], Tensor::from_parts(shape, data), Op::Narrow0 { x: self.id, start }))
    }

    /// 1-D convolution of `[B, C_in, L]` with weight `[C_out, C_in / groups, K]`.
    pub fn conv1d(&self, w: Var<'t, T>, bias: Option<Var<'t, T>>, spec: Conv1dSpec) -> Result<Var<'t, T>> {
        let (x, wv) = (self.value(), w.value());
        let bad = |d: String| shape_err("conv1d", d);
        if x.rank() != 3 || wv.rank() != 3 {
            return Err(bad(format!("input {:?}, weight {:?}", x.shape(), wv.shape())));
        }
        let (b, cin, len) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (cout, cin_g, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
        let g = spec.groups;
        if spec.stride == 0 || g == 0 || cin % g != 0 || cout % g != 0 || cin / g != cin_g {
            return Err(bad(format!("input {:?}, weight {:?}, {spec:?}", x.shape(), wv.shape())));
        }
        if len + 2 * spec.padding < k {
            return Err(bad(format!("input length {len} shorter than kernel {k}")));
        }
        if let Some(bv) = bias {
            if bv.shape() != [cout] {
                return Err(bad(format!("bias {:?} for {cout} channels", bv.shape())));
            }
        }
        let lout = (len + 2 * spec.padding - k) / spec.stride + 1;
        let cout_g = cout / g;
        let rows = cin_g * k;
        let block = rows * lout;
        let mut cols = vec![T::zero(); b * g * block];
        for bi in 0..b {
            for gi in 0..g {
                let dst = &mut cols[(bi * g + gi) * block..][..block];
                for ci in 0..cin_g {
                    let src = &x.data()[(bi * cin + gi * cin_g + ci) * len..][..len];
                    for kk in 0..k {
                        let row = &mut dst[(ci * k + kk) * lout..][..lout];
                        for (t, r) in row.iter_mut().enumerate() {
                            let pos = t * spec.stride + kk;
                            if pos >= spec.padding && pos - spec.padding < len {
                                *r = src[pos - spec.padding];
                            }
                        }
                    }
                }
            }
        }
        let mut out = vec![T::zero(); b * cout * lout];
        for bi in 0..b {
            for gi in 0..g {
                let wg = MatRef::new(&wv.data()[gi * cout_g * rows..][..cout_g * rows], cout_g, rows);
                let cg = MatRef::new(&cols[(bi * g + gi) * block..][..block], rows, lout);
                gemm(wg, cg, &mut out[(bi * cout + gi * cout_g) * lout..][..cout_g * lout], T::zero());
            }
        }
        let mut inputs = vec![*self, w];
        if let Some(bv) = bias {
            let bd = bv.value();
            for bi in 0..b {
                for c in 0..cout {
                    let bc = bd.data()[c];
                    for o in out[(bi * cout + c) * lout..][..lout].iter_mut() {
                        *o += bc;
                    }
                }
            }
            inputs.push(bv);
        }
        let value = Tensor::from_parts(vec![b, cout, lout], out);
        let op = Op::Conv1d {
            x: self.id,
            w: w.id,
            bias: bias.map(|v| v.id),
            spec,
            cols,
        };
        Ok(self.derive(&inputs, value, op))
    }

    /// Group normalization of `[B, C, ...]` with per-channel affine `[C]`.
    pub fn group_norm(&self, gamma: Var<'t, T>, beta: Var<'t, T>, groups: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.rank() < 2 || groups == 0 || x.shape()[1] % groups != 0 {
            return Err(shape_err("group_norm", format!("{:?} with {groups} groups", x.shape())));
        }
        let (b, c) = (x.shape()[0], x.shape()[1]);
        let inner = x.len() / (b * c);
        if gamma.shape() != [c] || beta.shape() != [c] {
            return Err(shape_err("group_norm", format!("affine {:?}/{:?} for {c} channels", gamma.shape(), beta.shape())));
        }
        let group_len = (c / groups) * inner;
        let (xhat, inv_std) = normalize_blocks(x.data(), group_len);
        let (gd, bd) = (gamma.value(), beta.value());
        let mut out = Vec::with_capacity(xhat.len());
        for (r, row) in xhat.chunks(inner).enumerate() {
            let (s, o) = (gd.data()[r % c], bd.data()[r % c]);
            out.extend(row.iter().map(|&v| v * s + o));
        }
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        let op = Op::GroupNorm {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            groups,
            xhat,
            inv_std,
        };
        Ok(self.derive(&[*self, gamma, beta], value, op))
    }

    /// Layer normalization over the last axis with affine `[D]`.
    pub fn layer_norm(&self, gamma: Var<'t, T>, beta: Var<'t, T>) -> Result<Var<'t, T>> {
        let x = self.value();
        let d = *x.shape().last().ok_or_else(|| shape_err("layer_norm", "rank-0 input".into()))?;
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(shape_err("layer_norm", format!("affine {:?}/{:?} for dim {d}", gamma.shape(), beta.shape())));
        }
        let (xhat, inv_std) = normalize_blocks(x.data(), d);
        let (gd, bd) = (gamma.value(), beta.value());
        let mut out = Vec::with_capacity(xhat.len());
        for row in xhat.chunks(d) {
            out.extend(row.iter().zip(gd.data()).zip(bd.data()).map(|((&v, &s), &o)| v * s + o));
        }
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        let op = Op::LayerNorm {
            x: self.id,
            gamma: gamma.id,
            beta: beta.id,
            xhat,
            inv_std,
        };
        Ok(self.derive(&[*self, gamma, beta], value, op))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&self) -> Var<'t, T> {
        let half = T::of(0.5);
        let inv_sqrt2 = T::of(std::f64::consts::FRAC_1_SQRT_2);
        let x = self.value();
        let cdf: Vec<T> = x.data().iter().map(|&v| half * (T::one() + (v * inv_sqrt2).erf())).collect();
        let out = x.data().iter().zip(&cdf).map(|(&v, &c)| v * c).collect();
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        self.derive(&[*self], value, Op::Gelu { x: self.id, cdf })
    }

    /// Softmax over the last axis.
    pub fn softmax(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let d = *x.shape().last().ok_or_else(|| shape_err("softmax", "rank-0 input".into()))?;
        let mut out = x.to_vec();
        for row in out.chunks_mut(d) {
            softmax_in_place(row);
        }
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.derive(&[*self], value, Op::Softmax(self.id)))
    }

    /// Inverted dropout with a caller-supplied keep mask (`true` = keep).
    pub fn dropout(&self, keep: &[bool], p: f64) -> Result<Var<'t, T>> {
        let x = self.value();
        if !(0.0..1.0).contains(&p) {
            return Err(Error::domain(format!("dropout probability {p} outside [0, 1)")));
        }
        if keep.len() != x.len() {
            return Err(shape_err("dropout", format!("mask of {} for {} elements", keep.len(), x.len())));
        }
        let scale = T::of(1.0 / (1.0 - p));
        let factors: Vec<T> = keep.iter().map(|&k| if k { scale } else { T::zero() }).collect();
        let out = x.data().iter().zip(&factors).map(|(&v, &f)| v * f).collect();
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.derive(&[*self], value, Op::Dropout { x: self.id, factors }))
    }

    /// One-hot of the last-axis argmax in the forward pass, identity in the backward pass.
    pub fn straight_through_onehot(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let d = *x.shape().last().ok_or_else(|| shape_err("straight_through", "rank-0 input".into()))?;
        let mut out = vec![T::zero(); x.len()];
        for (row, o) in x.data().chunks(d).zip(out.chunks_mut(d)) {
            o[argmax(row)] = T::one();
        }
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.derive(&[*self], value, Op::StraightThrough(self.id)))
    }

    pub fn exp(&self) -> Var<'t, T> {
        let value = self.value().map(|v| v.exp());
        self.derive(&[*self], value, Op::Exp(self.id))
    }

    /// `x ln x` elementwise with `0 ln 0 = 0`.
    pub fn xlogx(&self) -> Var<'t, T> {
        let value = self.value().map(xlogx);
        self.derive(&[*self], value, Op::XLogX(self.id))
    }

    /// Sum over the last axis.
    pub fn sum_last(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        let d = *x.shape().last().ok_or_else(|| shape_err("sum_last", "rank-0 input".into()))?;
        let out = x.data().chunks(d).map(|r| r.iter().copied().sum()).collect();
        let shape = x.shape()[..x.rank() - 1].to_vec();
        Ok(self.derive(&[*self], Tensor::from_parts(shape, out), Op::SumLast(self.id)))
    }

    /// Mean over the leading axis.
    pub fn mean_rows(&self) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.rank() == 0 || x.shape()[0] == 0 {
            return Err(shape_err("mean_rows", format!("{:?}", x.shape())));
        }
        let rows = x.shape()[0];
        let width = x.len() / rows;
        let mut out = vec![T::zero(); width];
        for row in x.data().chunks(width) {
            for (o, &v) in out.iter_mut().zip(row) {
                *o += v;
            }
        }
        let n = T::of(rows as f64);
        out.iter_mut().for_each(|v| *v /= n);
        let value = Tensor::from_parts(x.shape()[1..].to_vec(), out);
        Ok(self.derive(&[*self], value, Op::MeanRows(self.id)))
    }

    /// Row-wise cosine similarity of two `[n, d]` tensors, giving `[n]`.
    pub fn row_cosine(&self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        let (a, b) = self.same_shape(other, "row_cosine")?;
        if a.rank() != 2 {
            return Err(shape_err("row_cosine", format!("expected [n, d], got {:?}", a.shape())));
        }
        let d = a.shape()[1];
        let n = a.shape()[0];
        let mut out = Vec::with_capacity(n);
        let mut norm_a = Vec::with_capacity(n);
        let mut norm_b = Vec::with_capacity(n);
        for (i, (ra, rb)) in a.data().chunks(d).zip(b.data().chunks(d)).enumerate() {
            let na = ra.iter().map(|&v| v * v).sum::<T>().sqrt();
            let nb = rb.iter().map(|&v| v * v).sum::<T>().sqrt();
            if na == T::zero() {
                return Err(Error::domain(format!("cosine similarity: first argument has zero norm (row {i})")));
            }
            if nb == T::zero() {
                return Err(Error::domain(format!("cosine similarity: second argument has zero norm (row {i})")));
            }
            let dot: T = ra.iter().zip(rb).map(|(&x, &y)| x * y).sum();
            out.push(dot / (na * nb));
            norm_a.push(na);
            norm_b.push(nb);
        }
        let value = Tensor::from_parts(vec![n], out);
        let op = Op::RowCosine {
            a: self.id,
            b: other.id,
            norm_a,
            norm_b,
        };
        Ok(self.derive(&[*self, other], value, op))
    }

    /// Rows of the leading axis selected by `idx` (repeats allowed).
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.rank() == 0 {
            return Err(shape_err("gather_rows", "rank-0 input".into()));
        }
        let rows = x.shape()[0];
        let width = x.len() / rows.max(1);
        let mut out = Vec::with_capacity(idx.len() * width);
        for &i in idx {
            if i >= rows {
                return Err(shape_err("gather_rows", format!("row {i} out of {rows}")));
            }
            out.extend_from_slice(&x.data()[i * width..(i + 1) * width]);
        }
        let mut shape = x.shape().to_vec();
        shape[0] = idx.len();
        let value = Tensor::from_parts(shape, out);
        Ok(self.derive(&[*self], value, Op::GatherRows { x: self.id, idx: idx.to_vec() }))
    }

    /// Rows flagged in `rows` are replaced by `emb`; the others pass through.
    pub fn replace_rows(&self, emb: Var<'t, T>, rows: &[bool]) -> Result<Var<'t, T>> {
        let (x, e) = (self.value(), emb.value());
        if x.rank() == 0 || x.shape()[0] != rows.len() || x.len() != rows.len() * e.len() {
            return Err(shape_err(
                "replace_rows",
                format!("{:?} with embedding {:?} and {} flags", x.shape(), e.shape(), rows.len()),
            ));
        }
        let width = e.len();
        let mut out = x.to_vec();
        for (r, &m) in rows.iter().enumerate() {
            if m {
                out[r * width..(r + 1) * width].copy_from_slice(e.data());
            }
        }
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        let op = Op::ReplaceRows {
            x: self.id,
            emb: emb.id,
            rows: rows.to_vec(),
        };
        Ok(self.derive(&[*self, emb], value, op))
    }

    /// Weighted softmax cross-entropy of `[M, C]` logits whose target is column 0:
    /// `sum_i w_i * (logsumexp(row_i over S) - row_i[0])`, with `S` all columns when
    /// `include_target`, else columns `1..C`.
    pub fn cross_entropy_first(&self, weights: &[T], include_target: bool) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.rank() != 2 || x.shape()[0] != weights.len() || x.shape()[1] < 2 {
            return Err(shape_err(
                "cross_entropy",
                format!("logits {:?} with {} weights", x.shape(), weights.len()),
            ));
        }
        let c = x.shape()[1];
        let skip = usize::from(!include_target);
        let mut probs = vec![T::zero(); x.len()];
        let mut total = T::zero();
        for ((row, p), &w) in x.data().chunks(c).zip(probs.chunks_mut(c)).zip(weights) {
            let sub = &row[skip..];
            let max = sub.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for (pj, &v) in p[skip..].iter_mut().zip(sub) {
                *pj = (v - max).exp();
                z += *pj;
            }
            for pj in p[skip..].iter_mut() {
                *pj /= z;
            }
            total += w * (max + z.ln() - row[0]);
        }
        let op = Op::CrossEntropy {
            logits: self.id,
            weights: weights.to_vec(),
            probs,
        };
        Ok(self.derive(&[*self], Tensor::scalar(total), op))
    }
}

pub(crate) fn xlogx<T: Scalar>(v: T) -> T {
    if v == T::zero() {
        T::zero()
    } else {
        v * v.ln()
    }
}

/// Index of the first maximum.
pub(crate) fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        z += *v;
    }
    for v in row.iter_mut() {
        *v /= z;
    }
}

/// Standardize consecutive blocks of `block` elements; returns `(xhat, inv_std per block)`.
fn normalize_blocks<T: Scalar>(data: &[T], block: usize) -> (Vec<T>, Vec<T>) {
    let eps = T::of(NORM_EPS);
    let n = T::of(block as f64);
    let mut xhat = Vec::with_capacity(data.len());
    let mut inv_std = Vec::with_capacity(data.len() / block);
    for chunk in data.chunks(block) {
        let mean = chunk.iter().copied().sum::<T>() / n;
        let var = chunk.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let inv = T::one() / (var + eps).sqrt();
        xhat.extend(chunk.iter().map(|&v| (v - mean) * inv));
        inv_std.push(inv);
    }
    (xhat, inv_std)
}

/// Backward of [`normalize_blocks`] given `dxhat`: accumulates into `dx`.
fn normalize_blocks_backward<T: Scalar>(xhat: &[T], inv_std: &[T], dxhat: &[T], block: usize, dx: &mut [T]) {
    let n = T::of(block as f64);
    for (bi, ((xh, dxh), out)) in xhat
        .chunks(block)
        .zip(dxhat.chunks(block))
        .zip(dx.chunks_mut(block))
        .enumerate()
    {
        let sum_d: T = dxh.iter().copied().sum();
        let sum_dx: T = dxh.iter().zip(xh).map(|(&d, &x)| d * x).sum();
        let k = inv_std[bi] / n;
        for ((o, &d), &x) in out.iter_mut().zip(dxh).zip(xh) {
            *o += k * (n * d - sum_d - x * sum_dx);
        }
    }
}

pub(crate) fn permute_data<T: Scalar>(shape: &[usize], data: &[T], perm: &[usize]) -> (Vec<usize>, Vec<T>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    if n == 0 {
        return (out_shape, out);
    }
    if rank == 0 {
        out.push(data[0]);
        return (out_shape, out);
    }
    // Odometer over output indices; innermost axis copied in a tight loop.
    let last = rank - 1;
    let inner = out_shape[last];
    let inner_stride = strides[last];
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        let mut off = base;
        for _ in 0..inner {
            out.push(data[off]);
            off += inner_stride;
        }
        let mut axis = last;
        loop {
            if axis == 0 {
                return (out_shape, out);
            }
            axis -= 1;
            idx[axis] += 1;
            base += strides[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            base -= strides[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Gradient buffer for node `id`, allocated on first use; `None` for untracked nodes.
fn slot<'g, T: Scalar>(nodes: &[Node<T>], grads: &'g mut [Option<Vec<T>>], id: usize) -> Option<&'g mut Vec<T>> {
    if !nodes[id].tracked {
        return None;
    }
    let n = nodes[id].value.len();
    Some(grads[id].get_or_insert_with(|| vec![T::zero(); n]))
}

/// Adds the contribution built by `f` to node `id`'s gradient; the first
/// contribution is stored as is.
fn give<T: Scalar, I: IntoIterator<Item = T>>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], id: usize, f: impl FnOnce() -> I) {
    if !nodes[id].tracked {
        return;
    }
    let contrib = f();
    match grads[id].as_mut() {
        Some(acc) => add_into(acc, contrib),
        None => grads[id] = Some(contrib.into_iter().collect()),
    }
}

fn add_into<T: Scalar>(dst: &mut [T], src: impl IntoIterator<Item = T>) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// Propagate `g` (gradient of node `id`) into the gradients of its inputs.
pub(crate) fn backward_rule<T: Scalar>(nodes: &[Node<T>], id: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
    let val = |i: usize| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            give(nodes, grads, *a, || g.iter().copied());
            give(nodes, grads, *b, || g.iter().copied());
        }
        Op::Sub(a, b) => {
            give(nodes, grads, *a, || g.iter().copied());
            give(nodes, grads, *b, || g.iter().map(|&v| -v));
        }
        Op::Mul(a, b) => {
            let (av, bv) = (val(*a).clone(), val(*b).clone());
            give(nodes, grads, *a, || g.iter().zip(bv.data()).map(|(&d, &y)| d * y));
            give(nodes, grads, *b, || g.iter().zip(av.data()).map(|(&d, &x)| d * x));
        }
        Op::AddBias { x, bias } => {
            give(nodes, grads, *x, || g.iter().copied());
            let n = val(*bias).len();
            if let Some(gb) = slot(nodes, grads, *bias) {
                for row in g.chunks(n) {
                    add_into(gb, row.iter().copied());
                }
            }
        }
        Op::Scale(x, s) => {
            give(nodes, grads, *x, || g.iter().map(|&v| v * *s));
        }
        Op::Sum(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let g0 = g[0];
                gx.iter_mut().for_each(|v| *v += g0);
            }
        }
        Op::MatMul { a, w } => {
            let (av, wv) = (val(*a), val(*w));
            let (k, n) = (wv.shape()[0], wv.shape()[1]);
            let m = av.len() / k;
            let gm = MatRef::new(g, m, n);
            if let Some(ga) = slot(nodes, grads, *a) {
                gemm(gm, MatRef::new(wv.data(), k, n).t(), ga, T::one());
            }
            if let Some(gw) = slot(nodes, grads, *w) {
                gemm(MatRef::new(av.data(), m, k).t(), gm, gw, T::one());
            }
        }
        Op::Bmm { a, b, trans_b } => {
            let (av, bv) = (val(*a), val(*b));
            let (nb, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
            let p = if *trans_b { bv.shape()[1] } else { bv.shape()[2] };
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..nb {
                    let gi = MatRef::new(&g[i * m * p..][..m * p], m, p);
                    let bs = &bv.data()[i * k * p..][..k * p];
                    // dA = dOut @ B_eff^T
                    let bt = if *trans_b {
                        MatRef::new(bs, p, k)
                    } else {
                        MatRef::new(bs, k, p).t()
                    };
                    gemm(gi, bt, &mut ga[i * m * k..][..m * k], T::one());
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for i in 0..nb {
                    let gi = MatRef::new(&g[i * m * p..][..m * p], m, p);
                    let ai = MatRef::new(&av.data()[i * m * k..][..m * k], m, k);
                    let dst = &mut gb[i * k * p..][..k * p];
                    if *trans_b {
                        gemm(gi.t(), ai, dst, T::one());
                    } else {
                        gemm(ai.t(), gi, dst, T::one());
                    }
                }
            }
        }
        Op::Permute { x, perm } => {
            give(nodes, grads, *x, || permute_data(nodes[id].value.shape(), g, &inverse_perm(perm)).1);
        }
        Op::Reshape(x) => {
            give(nodes, grads, *x, || g.iter().copied());
        }
        Op::Narrow0 { x, start } => {
            let xv = val(*x);
            let row = xv.len() / xv.shape()[0];
            if let Some(gx) = slot(nodes, grads, *x) {
                add_into(&mut gx[start * row..], g.iter().copied());
            }
        }
        Op::Conv1d { x, w, bias, spec, cols } => {
            let (xv, wv) = (val(*x), val(*w));
            let (b, cin, len) = (xv.shape()[0], xv.shape()[1], xv.shape()[2]);
            let (cout, cin_g, k) = (wv.shape()[0], wv.shape()[1], wv.shape()[2]);
            let lout = nodes[id].value.shape()[2];
            let grp = spec.groups;
            let cout_g = cout / grp;
            let rows = cin_g * k;
            let block = rows * lout;
            if let Some(bi) = bias {
                if let Some(gb) = slot(nodes, grads, *bi) {
                    for bb in 0..b {
                        for c in 0..cout {
                            gb[c] += g[(bb * cout + c) * lout..][..lout].iter().copied().sum();
                        }
                    }
                }
            }
            if let Some(gw) = slot(nodes, grads, *w) {
                for bb in 0..b {
                    for gi in 0..grp {
                        let go = MatRef::new(&g[(bb * cout + gi * cout_g) * lout..][..cout_g * lout], cout_g, lout);
                        let cg = MatRef::new(&cols[(bb * grp + gi) * block..][..block], rows, lout);
                        gemm(go, cg.t(), &mut gw[gi * cout_g * rows..][..cout_g * rows], T::one());
                    }
                }
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                let mut dcols = vec![T::zero(); block];
                for bb in 0..b {
                    for gi in 0..grp {
                        let go = MatRef::new(&g[(bb * cout + gi * cout_g) * lout..][..cout_g * lout], cout_g, lout);
                        let wg = MatRef::new(&wv.data()[gi * cout_g * rows..][..cout_g * rows], cout_g, rows);
                        gemm(wg.t(), go, &mut dcols, T::zero());
                        for ci in 0..cin_g {
                            let dst = &mut gx[(bb * cin + gi * cin_g + ci) * len..][..len];
                            for kk in 0..k {
                                let row = &dcols[(ci * k + kk) * lout..][..lout];
                                for (t, &d) in row.iter().enumerate() {
                                    let pos = t * spec.stride + kk;
                                    if pos >= spec.padding && pos - spec.padding < len {
                                        dst[pos - spec.padding] += d;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Op::GroupNorm {
            x,
            gamma,
            beta,
            groups,
            xhat,
            inv_std,
        } => {
            let xv = val(*x);
            let (b, c) = (xv.shape()[0], xv.shape()[1]);
            let inner = xv.len() / (b * c);
            let gd = val(*gamma);
            // Rows of `inner` elements cycle through the channels.
            if let Some(gg) = slot(nodes, grads, *gamma) {
                for (r, (gr, xr)) in g.chunks(inner).zip(xhat.chunks(inner)).enumerate() {
                    gg[r % c] += gr.iter().zip(xr).map(|(&d, &xh)| d * xh).sum::<T>();
                }
            }
            if let Some(gb) = slot(nodes, grads, *beta) {
                for (r, gr) in g.chunks(inner).enumerate() {
                    gb[r % c] += gr.iter().copied().sum::<T>();
                }
            }
            if nodes[*x].tracked {
                let mut dxhat = Vec::with_capacity(g.len());
                for (r, gr) in g.chunks(inner).enumerate() {
                    let s = gd.data()[r % c];
                    dxhat.extend(gr.iter().map(|&d| d * s));
                }
                let gx = slot(nodes, grads, *x).unwrap();
                normalize_blocks_backward(xhat, inv_std, &dxhat, (c / groups) * inner, gx);
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let gd = val(*gamma);
            let d = gd.len();
            if let Some(gg) = slot(nodes, grads, *gamma) {
                for (gr, xr) in g.chunks(d).zip(xhat.chunks(d)) {
                    for ((o, &dv), &xh) in gg.iter_mut().zip(gr).zip(xr) {
                        *o += dv * xh;
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *beta) {
                for gr in g.chunks(d) {
                    add_into(gb, gr.iter().copied());
                }
            }
            if nodes[*x].tracked {
                let mut dxhat = Vec::with_capacity(g.len());
                for gr in g.chunks(d) {
                    dxhat.extend(gr.iter().zip(gd.data()).map(|(&dv, &s)| dv * s));
                }
                let gx = slot(nodes, grads, *x).unwrap();
                normalize_blocks_backward(xhat, inv_std, &dxhat, d, gx);
            }
        }
        Op::Gelu { x, cdf } => {
            let xv = val(*x);
            let half = T::of(0.5);
            let inv_sqrt_2pi = T::of(0.5 * std::f64::consts::FRAC_2_SQRT_PI * std::f64::consts::FRAC_1_SQRT_2);
            give(nodes, grads, *x, || {
                g.iter().zip(xv.data()).zip(cdf).map(move |((&d, &v), &c)| {
                    let pdf = inv_sqrt_2pi * (-half * v * v).exp();
                    d * (c + v * pdf)
                })
            });
        }
        Op::Softmax(x) => {
            let y = nodes[id].value.clone();
            let d = *y.shape().last().unwrap();
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((yr, gr), out) in y.data().chunks(d).zip(g.chunks(d)).zip(gx.chunks_mut(d)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((o, &yv), &gv) in out.iter_mut().zip(yr).zip(gr) {
                        *o += yv * (gv - dot);
                    }
                }
            }
        }
        Op::Dropout { x, factors } => {
            give(nodes, grads, *x, || g.iter().zip(factors).map(|(&d, &f)| d * f));
        }
        Op::StraightThrough(x) => {
            give(nodes, grads, *x, || g.iter().copied());
        }
        Op::Exp(x) => {
            let y = nodes[id].value.clone();
            give(nodes, grads, *x, || g.iter().zip(y.data()).map(|(&d, &v)| d * v));
        }
        Op::XLogX(x) => {
            let xv = val(*x);
            let floor = T::min_positive_value();
            give(nodes, grads, *x, || {
                g.iter().zip(xv.data()).map(move |(&d, &v)| d * (v.max(floor).ln() + T::one()))
            });
        }
        Op::SumLast(x) => {
            let d = *val(*x).shape().last().unwrap();
            if let Some(gx) = slot(nodes, grads, *x) {
                for (row, &gv) in gx.chunks_mut(d).zip(g) {
                    row.iter_mut().for_each(|v| *v += gv);
                }
            }
        }
        Op::MeanRows(x) => {
            let xv = val(*x);
            let rows = xv.shape()[0];
            let inv = T::one() / T::of(rows as f64);
            if let Some(gx) = slot(nodes, grads, *x) {
                for row in gx.chunks_mut(g.len()) {
                    add_into(row, g.iter().map(|&v| v * inv));
                }
            }
        }
        Op::RowCosine { a, b, norm_a, norm_b } => {
            let (av, bv) = (val(*a).clone(), val(*b).clone());
            let sim = nodes[id].value.clone();
            let d = av.shape()[1];
            let rows = av.data().chunks(d).zip(bv.data().chunks(d)).enumerate();
            if nodes[*a].tracked {
                let ga = slot(nodes, grads, *a).unwrap();
                for (i, (ra, rb)) in rows.clone() {
                    let (na, nb, s) = (norm_a[i], norm_b[i], sim.data()[i]);
                    let out = &mut ga[i * d..(i + 1) * d];
                    for ((o, &x), &y) in out.iter_mut().zip(ra).zip(rb) {
                        *o += g[i] * (y / (na * nb) - s * x / (na * na));
                    }
                }
            }
            if nodes[*b].tracked {
                let gb = slot(nodes, grads, *b).unwrap();
                for (i, (ra, rb)) in rows {
                    let (na, nb, s) = (norm_a[i], norm_b[i], sim.data()[i]);
                    let out = &mut gb[i * d..(i + 1) * d];
                    for ((o, &x), &y) in out.iter_mut().zip(ra).zip(rb) {
                        *o += g[i] * (x / (na * nb) - s * y / (nb * nb));
                    }
                }
            }
        }
        Op::GatherRows { x, idx } => {
            let xv = val(*x);
            let width = xv.len() / xv.shape()[0].max(1);
            if let Some(gx) = slot(nodes, grads, *x) {
                for (j, &i) in idx.iter().enumerate() {
                    add_into(&mut gx[i * width..(i + 1) * width], g[j * width..(j + 1) * width].iter().copied());
                }
            }
        }
        Op::ReplaceRows { x, emb, rows } => {
            let width = val(*emb).len();
            if let Some(gx) = slot(nodes, grads, *x) {
                for (r, &m) in rows.iter().enumerate() {
                    if !m {
                        add_into(&mut gx[r * width..(r + 1) * width], g[r * width..(r + 1) * width].iter().copied());
                    }
                }
            }
            if let Some(ge) = slot(nodes, grads, *emb) {
                for (r, &m) in rows.iter().enumerate() {
                    if m {
                        add_into(ge, g[r * width..(r + 1) * width].iter().copied());
                    }
                }
            }
        }
        Op::CrossEntropy { logits, weights, probs } => {
            let c = val(*logits).shape()[1];
            if let Some(gx) = slot(nodes, grads, *logits) {
                for (i, (row, p)) in gx.chunks_mut(c).zip(probs.chunks(c)).enumerate() {
                    let scale = g[0] * weights[i];
                    for (j, (o, &pj)) in row.iter_mut().zip(p).enumerate() {
                        let target = if j == 0 { T::one() } else { T::zero() };
                        *o += scale * (pj - target);
                    }
                }
            }
        }
    }
}
