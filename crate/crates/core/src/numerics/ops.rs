//! Differentiable operations. Each forward function records an [`Op`] whose
//! `backward` pushes vector-Jacobian products to the parents.

use super::kernels::{gemm_nn, gemm_nt, gemm_tn};
use super::scalar::Scalar;
use super::tensor::{Node, Tensor};
use crate::error::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Which entries of each softmax row take part in the normalisation.
#[derive(Clone, Debug, PartialEq)]
pub enum SoftmaxMask {
    None,
    /// Rows of trailing `[T, T]` blocks: row `i` sees columns `0..=i`.
    Causal,
    /// Same column mask for every row; `false` columns get probability 0.
    Columns(Vec<bool>),
}

impl SoftmaxMask {
    fn allows(&self, row: usize, col: usize, width: usize) -> bool {
        match self {
            SoftmaxMask::None => true,
            SoftmaxMask::Causal => col <= row % width,
            SoftmaxMask::Columns(keep) => keep[col],
        }
    }
}

pub(crate) enum Op<T: Scalar> {
    MatMul { a: Tensor<T>, b: Tensor<T>, trans_b: bool },
    BatchMatMul { a: Tensor<T>, b: Tensor<T>, trans_b: bool },
    Add(Tensor<T>, Tensor<T>),
    Mul(Tensor<T>, Tensor<T>),
    Scale(Tensor<T>, T),
    Sum(Tensor<T>),
    Gelu(Tensor<T>),
    Sigmoid(Tensor<T>),
    Softmax(Tensor<T>),
    LayerNorm { x: Tensor<T>, gain: Tensor<T>, bias: Tensor<T>, xhat: Vec<T>, rstd: Vec<T> },
    Gather { table: Tensor<T>, ids: Vec<usize> },
    SplitHeads { x: Tensor<T>, batch: usize, seq: usize, heads: usize },
    MergeHeads { x: Tensor<T>, batch: usize, seq: usize, heads: usize },
    MeanPool { x: Tensor<T>, groups: usize },
    Mixture { parts: Vec<Tensor<T>>, cols: Vec<usize>, w: Tensor<T> },
    CrossEntropy { logits: Tensor<T>, labels: Vec<usize>, probs: Vec<T> },
    Reshape(Tensor<T>),
}

impl<T: Scalar> Op<T> {
    pub(crate) fn parents(&self) -> Vec<&Tensor<T>> {
        match self {
            Op::MatMul { a, b, .. } | Op::BatchMatMul { a, b, .. } => vec![a, b],
            Op::Add(a, b) | Op::Mul(a, b) => vec![a, b],
            Op::Scale(a, _) | Op::Sum(a) | Op::Gelu(a) | Op::Sigmoid(a) | Op::Reshape(a) => vec![a],
            Op::Softmax(x) => vec![x],
            Op::LayerNorm { x, gain, bias, .. } => vec![x, gain, bias],
            Op::Gather { table, .. } => vec![table],
            Op::SplitHeads { x, .. } | Op::MergeHeads { x, .. } | Op::MeanPool { x, .. } => vec![x],
            Op::Mixture { parts, w, .. } => {
                let mut v: Vec<&Tensor<T>> = parts.iter().collect();
                v.push(w);
                v
            }
            Op::CrossEntropy { logits, .. } => vec![logits],
        }
    }

    pub(crate) fn backward(
        &self,
        out: &Node<T>,
        g: &[T],
        acc: &mut dyn FnMut(&Tensor<T>, Vec<T>),
    ) {
        match self {
            Op::MatMul { a, b, trans_b } => {
                let (p, q) = (a.shape()[0], a.shape()[1]);
                let s = out.shape[1];
                let ad = a.data();
                let bd = b.data();
                if a.requires_grad() {
                    let mut da = vec![T::zero(); p * q];
                    if *trans_b {
                        gemm_nn(g, &bd, &mut da, p, s, q);
                    } else {
                        gemm_nt(g, &bd, &mut da, p, s, q);
                    }
                    acc(a, da);
                }
                if b.requires_grad() {
                    let mut db = vec![T::zero(); b.numel()];
                    if *trans_b {
                        gemm_tn(g, &ad, &mut db, s, p, q);
                    } else {
                        gemm_tn(&ad, g, &mut db, q, p, s);
                    }
                    acc(b, db);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let (nb, p, q) = (a.shape()[0], a.shape()[1], a.shape()[2]);
                let s = out.shape[2];
                let ad = a.data();
                let bd = b.data();
                let bsz = q * s;
                if a.requires_grad() {
                    let mut da = vec![T::zero(); nb * p * q];
                    for n in 0..nb {
                        let gs = &g[n * p * s..(n + 1) * p * s];
                        let bs = &bd[n * bsz..(n + 1) * bsz];
                        let das = &mut da[n * p * q..(n + 1) * p * q];
                        if *trans_b {
                            gemm_nn(gs, bs, das, p, s, q);
                        } else {
                            gemm_nt(gs, bs, das, p, s, q);
                        }
                    }
                    acc(a, da);
                }
                if b.requires_grad() {
                    let mut db = vec![T::zero(); nb * bsz];
                    for n in 0..nb {
                        let gs = &g[n * p * s..(n + 1) * p * s];
                        let as_ = &ad[n * p * q..(n + 1) * p * q];
                        let dbs = &mut db[n * bsz..(n + 1) * bsz];
                        if *trans_b {
                            gemm_tn(gs, as_, dbs, s, p, q);
                        } else {
                            gemm_tn(as_, gs, dbs, q, p, s);
                        }
                    }
                    acc(b, db);
                }
            }
            Op::Add(a, b) => {
                acc(a, g.to_vec());
                acc(b, g.to_vec());
            }
            Op::Mul(a, b) => {
                if a.requires_grad() {
                    let bd = b.data();
                    acc(a, g.iter().zip(bd.iter()).map(|(&gi, &bi)| gi * bi).collect());
                }
                if b.requires_grad() {
                    let ad = a.data();
                    acc(b, g.iter().zip(ad.iter()).map(|(&gi, &ai)| gi * ai).collect());
                }
            }
            Op::Scale(a, c) => acc(a, g.iter().map(|&gi| gi * *c).collect()),
            Op::Sum(a) => acc(a, vec![g[0]; a.numel()]),
            Op::Gelu(a) => {
                let ad = a.data();
                acc(a, g.iter().zip(ad.iter()).map(|(&gi, &x)| gi * gelu_grad(x)).collect());
            }
            Op::Sigmoid(a) => {
                let y = out.data.borrow();
                acc(
                    a,
                    g.iter()
                        .zip(y.iter())
                        .map(|(&gi, &yi)| gi * yi * (T::one() - yi))
                        .collect(),
                );
            }
            Op::Softmax(x) => {
                let y = out.data.borrow();
                let width = *out.shape.last().unwrap();
                let mut dx = vec![T::zero(); y.len()];
                for ((yr, gr), dr) in y
                    .chunks(width)
                    .zip(g.chunks(width))
                    .zip(dx.chunks_mut(width))
                {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    for ((d, &yi), &gi) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yi * (gi - dot);
                    }
                }
                acc(x, dx);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = *out.shape.last().unwrap();
                let gd = gain.data();
                let rows = xhat.len() / d;
                if x.requires_grad() {
                    let mut dx = vec![T::zero(); xhat.len()];
                    let inv_d = T::one() / T::lit(d as f64);
                    for r in 0..rows {
                        let xr = &xhat[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        let mut m1 = T::zero();
                        let mut m2 = T::zero();
                        for j in 0..d {
                            let dxh = gr[j] * gd[j];
                            m1 += dxh;
                            m2 += dxh * xr[j];
                        }
                        m1 *= inv_d;
                        m2 *= inv_d;
                        for j in 0..d {
                            let dxh = gr[j] * gd[j];
                            dx[r * d + j] = rstd[r] * (dxh - m1 - xr[j] * m2);
                        }
                    }
                    acc(x, dx);
                }
                if gain.requires_grad() {
                    let mut dg = vec![T::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            dg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                    acc(gain, dg);
                }
                if bias.requires_grad() {
                    let mut db = vec![T::zero(); d];
                    for r in 0..rows {
                        for j in 0..d {
                            db[j] += g[r * d + j];
                        }
                    }
                    acc(bias, db);
                }
            }
            Op::Gather { table, ids } => {
                let d = table.shape()[1];
                let mut dt = vec![T::zero(); table.numel()];
                for (r, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        dt[id * d + j] += g[r * d + j];
                    }
                }
                acc(table, dt);
            }
            Op::SplitHeads { x, batch, seq, heads } => {
                let mut dx = vec![T::zero(); g.len()];
                merge_heads_into(g, &mut dx, *batch, *seq, *heads);
                acc(x, dx);
            }
            Op::MergeHeads { x, batch, seq, heads } => {
                let mut dx = vec![T::zero(); g.len()];
                split_heads_into(g, &mut dx, *batch, *seq, *heads);
                acc(x, dx);
            }
            Op::MeanPool { x, groups } => {
                let d = out.shape[1];
                let per = x.shape()[0] / groups;
                let inv = T::one() / T::lit(per as f64);
                let mut dx = vec![T::zero(); x.numel()];
                for grp in 0..*groups {
                    for r in 0..per {
                        let row = grp * per + r;
                        for j in 0..d {
                            dx[row * d + j] = g[grp * d + j] * inv;
                        }
                    }
                }
                acc(x, dx);
            }
            Op::Mixture { parts, cols, w } => {
                let (n, m) = (w.shape()[0], w.shape()[1]);
                let d = out.shape[1];
                let wd = w.data();
                for (part, &c) in parts.iter().zip(cols) {
                    if part.requires_grad() {
                        let mut dp = vec![T::zero(); n * d];
                        for r in 0..n {
                            let wr = wd[r * m + c];
                            for j in 0..d {
                                dp[r * d + j] = wr * g[r * d + j];
                            }
                        }
                        acc(part, dp);
                    }
                }
                if w.requires_grad() {
                    let mut dw = vec![T::zero(); n * m];
                    for (part, &c) in parts.iter().zip(cols) {
                        let pd = part.data();
                        for r in 0..n {
                            let mut s = T::zero();
                            for j in 0..d {
                                s += pd[r * d + j] * g[r * d + j];
                            }
                            dw[r * m + c] += s;
                        }
                    }
                    acc(w, dw);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let c = logits.shape()[1];
                let n = labels.len();
                let scale = g[0] / T::lit(n as f64);
                let mut dl = probs.clone();
                for (r, &lab) in labels.iter().enumerate() {
                    dl[r * c + lab] -= T::one();
                }
                for v in &mut dl {
                    *v *= scale;
                }
                acc(logits, dl);
            }
            Op::Reshape(a) => acc(a, g.to_vec()),
        }
    }
}

fn gelu_consts<T: Scalar>() -> (T, T) {
    (T::lit((2.0 / std::f64::consts::PI).sqrt()), T::lit(0.044715))
}

fn gelu_val<T: Scalar>(x: T) -> T {
    let (c, k) = gelu_consts::<T>();
    let half = T::lit(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

fn gelu_grad<T: Scalar>(x: T) -> T {
    let (c, k) = gelu_consts::<T>();
    let half = T::lit(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * k * x * x)
}

/// Logistic function without overflow for large `|x|`.
pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn split_heads_into<T: Scalar>(x: &[T], out: &mut [T], batch: usize, seq: usize, heads: usize) {
    let d = x.len() / (batch * seq);
    let dh = d / heads;
    for b in 0..batch {
        for t in 0..seq {
            for h in 0..heads {
                let src = (b * seq + t) * d + h * dh;
                let dst = ((b * heads + h) * seq + t) * dh;
                out[dst..dst + dh].copy_from_slice(&x[src..src + dh]);
            }
        }
    }
}

fn merge_heads_into<T: Scalar>(x: &[T], out: &mut [T], batch: usize, seq: usize, heads: usize) {
    let d = x.len() / (batch * seq);
    let dh = d / heads;
    for b in 0..batch {
        for t in 0..seq {
            for h in 0..heads {
                let src = ((b * heads + h) * seq + t) * dh;
                let dst = (b * seq + t) * d + h * dh;
                out[dst..dst + dh].copy_from_slice(&x[src..src + dh]);
            }
        }
    }
}

fn check_finite<T: Scalar>(op: &str, data: &[T]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite input to {op}")))
    }
}

/// `a[p×q] · b[q×s]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
        return Err(Error::shape("matmul", sa, sb));
    }
    let (p, q, s) = (sa[0], sa[1], sb[1]);
    let mut c = vec![T::zero(); p * s];
    gemm_nn(&a.data(), &b.data(), &mut c, p, q, s);
    Ok(Tensor::from_op(vec![p, s], c, Op::MatMul { a: a.clone(), b: b.clone(), trans_b: false }))
}

/// `a[p×q] · b[s×q]ᵀ`, the shape of a linear layer with weight `b`.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[1] {
        return Err(Error::shape("matmul_nt", sa, sb));
    }
    let (p, q, s) = (sa[0], sa[1], sb[0]);
    let mut c = vec![T::zero(); p * s];
    gemm_nt(&a.data(), &b.data(), &mut c, p, q, s);
    Ok(Tensor::from_op(vec![p, s], c, Op::MatMul { a: a.clone(), b: b.clone(), trans_b: true }))
}

/// Batched product over the leading axis: `[n,p,q]·[n,q,s]`, or `[n,p,q]·[n,s,q]ᵀ`.
pub fn bmm<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, trans_b: bool) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    let inner_ok = if trans_b { sa.len() == 3 && sb.len() == 3 && sa[2] == sb[2] } else { sa.len() == 3 && sb.len() == 3 && sa[2] == sb[1] };
    if !inner_ok || sa[0] != sb[0] {
        return Err(Error::shape("bmm", sa, sb));
    }
    let (nb, p, q) = (sa[0], sa[1], sa[2]);
    let s = if trans_b { sb[1] } else { sb[2] };
    let ad = a.data();
    let bd = b.data();
    let mut c = vec![T::zero(); nb * p * s];
    for n in 0..nb {
        let as_ = &ad[n * p * q..(n + 1) * p * q];
        let bs = &bd[n * q * s..(n + 1) * q * s];
        let cs = &mut c[n * p * s..(n + 1) * p * s];
        if trans_b {
            gemm_nt(as_, bs, cs, p, q, s);
        } else {
            gemm_nn(as_, bs, cs, p, q, s);
        }
    }
    drop((ad, bd));
    Ok(Tensor::from_op(vec![nb, p, s], c, Op::BatchMatMul { a: a.clone(), b: b.clone(), trans_b }))
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("add", a.shape(), b.shape()));
    }
    let c = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x + y).collect();
    Ok(Tensor::from_op(a.shape().to_vec(), c, Op::Add(a.clone(), b.clone())))
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(Error::shape("mul", a.shape(), b.shape()));
    }
    let c = a.data().iter().zip(b.data().iter()).map(|(&x, &y)| x * y).collect();
    Ok(Tensor::from_op(a.shape().to_vec(), c, Op::Mul(a.clone(), b.clone())))
}

pub fn scale<T: Scalar>(a: &Tensor<T>, c: T) -> Tensor<T> {
    let d = a.data().iter().map(|&x| x * c).collect();
    Tensor::from_op(a.shape().to_vec(), d, Op::Scale(a.clone(), c))
}

pub fn sum<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let s = a.data().iter().copied().sum();
    Tensor::from_op(vec![1], vec![s], Op::Sum(a.clone()))
}

/// Tanh-approximated GELU.
pub fn gelu<T: Scalar>(a: &Tensor<T>) -> Tensor<T> {
    let d = a.data().iter().map(|&x| gelu_val(x)).collect();
    Tensor::from_op(a.shape().to_vec(), d, Op::Gelu(a.clone()))
}

pub fn sigmoid<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    check_finite("sigmoid", &a.data())?;
    let d = a.data().iter().map(|&x| sigmoid_scalar(x)).collect();
    Ok(Tensor::from_op(a.shape().to_vec(), d, Op::Sigmoid(a.clone())))
}

/// Softmax over the last axis with max-subtraction. Masked entries are exactly 0.
pub fn softmax_masked<T: Scalar>(x: &Tensor<T>, mask: SoftmaxMask) -> Result<Tensor<T>> {
    let width = *x.shape().last().unwrap();
    if let SoftmaxMask::Columns(keep) = &mask {
        if keep.len() != width {
            return Err(Error::shape("softmax mask", x.shape(), &[keep.len()]));
        }
        if !keep.iter().any(|&k| k) {
            return Err(Error::Input("softmax mask removes every column".into()));
        }
    }
    if mask == SoftmaxMask::Causal && (x.shape().len() < 2 || x.shape()[x.shape().len() - 2] != width) {
        return Err(Error::shape("causal softmax", x.shape(), &[width, width]));
    }
    let xd = x.data();
    check_finite("softmax", &xd)?;
    let mut y = vec![T::zero(); xd.len()];
    for (r, (xr, yr)) in xd.chunks(width).zip(y.chunks_mut(width)).enumerate() {
        let mut mx = T::neg_infinity();
        for (j, &v) in xr.iter().enumerate() {
            if mask.allows(r, j, width) && v > mx {
                mx = v;
            }
        }
        let mut z = T::zero();
        for (j, (&v, o)) in xr.iter().zip(yr.iter_mut()).enumerate() {
            if mask.allows(r, j, width) {
                let e = (v - mx).exp();
                *o = e;
                z += e;
            }
        }
        for o in yr.iter_mut() {
            *o /= z;
        }
    }
    drop(xd);
    Ok(Tensor::from_op(x.shape().to_vec(), y, Op::Softmax(x.clone())))
}

pub fn softmax<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    softmax_masked(x, SoftmaxMask::None)
}

/// Row-wise layer normalisation over the last axis, followed by `gain ⊙ · + bias`.
pub fn layer_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, bias: &Tensor<T>) -> Result<Tensor<T>> {
    let d = *x.shape().last().unwrap();
    if gain.shape() != [d] || bias.shape() != [d] {
        return Err(Error::shape("layer_norm", x.shape(), gain.shape()));
    }
    let xd = x.data();
    let gd = gain.data();
    let bd = bias.data();
    let rows = xd.len() / d;
    let inv_d = T::one() / T::lit(d as f64);
    let eps = T::lit(LN_EPS);
    let mut xhat = vec![T::zero(); xd.len()];
    let mut rstd = vec![T::zero(); rows];
    let mut y = vec![T::zero(); xd.len()];
    for r in 0..rows {
        let xr = &xd[r * d..(r + 1) * d];
        let mean = xr.iter().copied().sum::<T>() * inv_d;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd[r] = rs;
        for j in 0..d {
            let h = (xr[j] - mean) * rs;
            xhat[r * d + j] = h;
            y[r * d + j] = h * gd[j] + bd[j];
        }
    }
    drop((xd, gd, bd));
    Ok(Tensor::from_op(
        x.shape().to_vec(),
        y,
        Op::LayerNorm { x: x.clone(), gain: gain.clone(), bias: bias.clone(), xhat, rstd },
    ))
}

/// Rows of `table[V×d]` selected by `ids`.
pub fn gather_rows<T: Scalar>(table: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
    let s = table.shape();
    if s.len() != 2 {
        return Err(Error::shape("gather_rows", s, &[ids.len()]));
    }
    let (v, d) = (s[0], s[1]);
    if ids.is_empty() {
        return Err(Error::Input("gather_rows with no ids".into()));
    }
    if let Some(&bad) = ids.iter().find(|&&i| i >= v) {
        return Err(Error::Input(format!("row id {bad} out of range for {v} rows")));
    }
    let td = table.data();
    let mut out = Vec::with_capacity(ids.len() * d);
    for &i in ids {
        out.extend_from_slice(&td[i * d..(i + 1) * d]);
    }
    drop(td);
    Ok(Tensor::from_op(vec![ids.len(), d], out, Op::Gather { table: table.clone(), ids: ids.to_vec() }))
}

/// `[batch·seq, heads·dh]` → `[batch·heads, seq, dh]`.
pub fn split_heads<T: Scalar>(x: &Tensor<T>, batch: usize, seq: usize, heads: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 2 || s[0] != batch * seq || s[1] % heads != 0 {
        return Err(Error::shape("split_heads", s, &[batch, seq, heads]));
    }
    let dh = s[1] / heads;
    let mut out = vec![T::zero(); x.numel()];
    split_heads_into(&x.data(), &mut out, batch, seq, heads);
    Ok(Tensor::from_op(vec![batch * heads, seq, dh], out, Op::SplitHeads { x: x.clone(), batch, seq, heads }))
}

/// Inverse of [`split_heads`].
pub fn merge_heads<T: Scalar>(x: &Tensor<T>, batch: usize, seq: usize, heads: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 3 || s[0] != batch * heads || s[1] != seq {
        return Err(Error::shape("merge_heads", s, &[batch, seq, heads]));
    }
    let d = s[2] * heads;
    let mut out = vec![T::zero(); x.numel()];
    merge_heads_into(&x.data(), &mut out, batch, seq, heads);
    Ok(Tensor::from_op(vec![batch * seq, d], out, Op::MergeHeads { x: x.clone(), batch, seq, heads }))
}

/// Mean over consecutive row blocks: `[groups·L, d]` → `[groups, d]`.
pub fn mean_pool<T: Scalar>(x: &Tensor<T>, groups: usize) -> Result<Tensor<T>> {
    let s = x.shape();
    if s.len() != 2 || groups == 0 || s[0] % groups != 0 {
        return Err(Error::shape("mean_pool", s, &[groups]));
    }
    let d = s[1];
    let per = s[0] / groups;
    let inv = T::one() / T::lit(per as f64);
    let xd = x.data();
    let mut out = vec![T::zero(); groups * d];
    for g in 0..groups {
        for r in 0..per {
            let row = &xd[(g * per + r) * d..(g * per + r + 1) * d];
            for j in 0..d {
                out[g * d + j] += row[j];
            }
        }
        for j in 0..d {
            out[g * d + j] *= inv;
        }
    }
    drop(xd);
    Ok(Tensor::from_op(vec![groups, d], out, Op::MeanPool { x: x.clone(), groups }))
}

/// Row-wise weighted combination: `out[n] = Σᵢ w[n, colsᵢ] · partsᵢ[n]`.
pub fn mixture<T: Scalar>(parts: &[Tensor<T>], cols: &[usize], w: &Tensor<T>) -> Result<Tensor<T>> {
    if parts.is_empty() || parts.len() != cols.len() {
        return Err(Error::Input("mixture needs one column per part".into()));
    }
    let ws = w.shape();
    let ps = parts[0].shape();
    if ws.len() != 2 || ps.len() != 2 || ws[0] != ps[0] {
        return Err(Error::shape("mixture", ws, ps));
    }
    let (n, m) = (ws[0], ws[1]);
    let d = ps[1];
    for p in parts {
        if p.shape() != ps {
            return Err(Error::shape("mixture", ps, p.shape()));
        }
    }
    if cols.iter().any(|&c| c >= m) {
        return Err(Error::Input("mixture column out of range".into()));
    }
    let wd = w.data();
    let mut out = vec![T::zero(); n * d];
    for (p, &c) in parts.iter().zip(cols) {
        let pd = p.data();
        for r in 0..n {
            let wr = wd[r * m + c];
            for j in 0..d {
                out[r * d + j] += wr * pd[r * d + j];
            }
        }
    }
    drop(wd);
    Ok(Tensor::from_op(
        vec![n, d],
        out,
        Op::Mixture { parts: parts.to_vec(), cols: cols.to_vec(), w: w.clone() },
    ))
}

/// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
pub fn cross_entropy<T: Scalar>(logits: &Tensor<T>, labels: &[usize]) -> Result<Tensor<T>> {
    let s = logits.shape();
    if s.len() != 2 || s[0] != labels.len() {
        return Err(Error::shape("cross_entropy", s, &[labels.len()]));
    }
    let c = s[1];
    if let Some(&bad) = labels.iter().find(|&&l| l >= c) {
        return Err(Error::Input(format!("label {bad} out of range for {c} classes")));
    }
    let ld = logits.data();
    check_finite("cross_entropy", &ld)?;
    let mut probs = vec![T::zero(); ld.len()];
    let mut total = T::zero();
    for (r, &lab) in labels.iter().enumerate() {
        let row = &ld[r * c..(r + 1) * c];
        let mx = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for (j, &v) in row.iter().enumerate() {
            let e = (v - mx).exp();
            probs[r * c + j] = e;
            z += e;
        }
        for p in &mut probs[r * c..(r + 1) * c] {
            *p /= z;
        }
        total += z.ln() + mx - row[lab];
    }
    drop(ld);
    let loss = total / T::lit(labels.len() as f64);
    Ok(Tensor::from_op(
        vec![1],
        vec![loss],
        Op::CrossEntropy { logits: logits.clone(), labels: labels.to_vec(), probs },
    ))
}

pub fn reshape<T: Scalar>(a: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if shape.iter().product::<usize>() != a.numel() {
        return Err(Error::shape("reshape", a.shape(), shape));
    }
    Ok(Tensor::from_op(shape.to_vec(), a.to_vec(), Op::Reshape(a.clone())))
}
