//! Raw forward kernels. The tape and the plain tensor helpers both call into
//! these, so a tape-built graph and a direct computation of the same
//! expression agree bit-for-bit.

use super::num_like::Scalar;
use super::{Result, Tensor, TensorError};

pub const RMS_EPS: f64 = 1e-5;

fn mismatch<T: Scalar>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

/// Row-major view of a matrix, optionally transposed.
#[derive(Clone, Copy)]
pub(crate) struct MatView<'a, T> {
    pub data: &'a [T],
    pub rows: usize,
    pub cols: usize,
    pub transposed: bool,
}

impl<'a, T: Scalar> MatView<'a, T> {
    pub fn new(data: &'a [T], rows: usize, cols: usize) -> Self {
        Self {
            data,
            rows,
            cols,
            transposed: false,
        }
    }

    pub fn t(self) -> Self {
        Self {
            transposed: !self.transposed,
            ..self
        }
    }

    /// Logical shape after the optional transpose.
    fn dims(&self) -> (usize, usize) {
        if self.transposed {
            (self.cols, self.rows)
        } else {
            (self.rows, self.cols)
        }
    }

    fn strides(&self) -> (isize, isize) {
        if self.transposed {
            (1, self.cols as isize)
        } else {
            (self.cols as isize, 1)
        }
    }
}

/// `out (+)= a · b`. `out` is `[m × n]` row-major.
pub(crate) fn gemm<T: Scalar>(a: MatView<'_, T>, b: MatView<'_, T>, out: &mut [T], accumulate: bool) {
    let (m, k) = a.dims();
    let (k2, n) = b.dims();
    assert_eq!(k, k2, "gemm inner dimensions");
    assert_eq!(out.len(), m * n, "gemm output size");
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        if !accumulate {
            out.iter_mut().for_each(|v| *v = T::ZERO);
        }
        return;
    }
    let (rsa, csa) = a.strides();
    let (rsb, csb) = b.strides();
    let beta = if accumulate { T::ONE } else { T::ZERO };
    // SAFETY: views are bounds-checked by construction (rows*cols == len) and
    // `out` is an exclusive slice of exactly m*n elements.
    unsafe {
        T::gemm(
            m,
            k,
            n,
            T::ONE,
            a.data.as_ptr(),
            rsa,
            csa,
            b.data.as_ptr(),
            rsb,
            csb,
            beta,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// `[.. × k] · [k × n] → [.. × n]`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape().is_empty() || b.shape().len() != 2 || a.last_dim() != b.shape()[0] {
        return Err(mismatch("matmul", a, b));
    }
    let m = a.leading();
    let k = a.last_dim();
    let n = b.shape()[1];
    let mut out = vec![T::ZERO; m * n];
    gemm(MatView::new(a.data(), m, k), MatView::new(b.data(), k, n), &mut out, false);
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    Ok(Tensor::from_parts(shape, out))
}

/// `a · bᵀ` for `a: [.. × k]`, `b: [n × k]`.
pub fn matmul_nt<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape().is_empty() || b.shape().len() != 2 || a.last_dim() != b.shape()[1] {
        return Err(mismatch("matmul_nt", a, b));
    }
    let m = a.leading();
    let k = a.last_dim();
    let n = b.shape()[0];
    let mut out = vec![T::ZERO; m * n];
    gemm(MatView::new(a.data(), m, k), MatView::new(b.data(), n, k).t(), &mut out, false);
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    Ok(Tensor::from_parts(shape, out))
}

pub fn transpose<T: Scalar>(a: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape().len() != 2 {
        return Err(TensorError::Rank {
            op: "transpose",
            expected: 2,
            shape: a.shape().to_vec(),
        });
    }
    let (r, c) = (a.shape()[0], a.shape()[1]);
    let src = a.data();
    let mut out = vec![T::ZERO; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = src[i * c + j];
        }
    }
    Ok(Tensor::from_parts(vec![c, r], out))
}

/// How the right operand of an elementwise op lines up with the left.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    /// `b`'s shape equals the trailing dimensions of `a`.
    Trailing,
    Scalar,
}

pub(crate) fn broadcast_kind<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        Ok(Broadcast::Same)
    } else if b.numel() == 1 && b.shape().len() <= 1 {
        Ok(Broadcast::Scalar)
    } else if b.shape().len() < a.shape().len() && a.shape().ends_with(b.shape()) {
        Ok(Broadcast::Trailing)
    } else {
        Err(mismatch(op, a, b))
    }
}

fn zip_with<T: Scalar>(
    op: &'static str,
    a: &Tensor<T>,
    b: &Tensor<T>,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    let kind = broadcast_kind(op, a, b)?;
    let (ad, bd) = (a.data(), b.data());
    let out = match kind {
        Broadcast::Same => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
        Broadcast::Scalar => ad.iter().map(|&x| f(x, bd[0])).collect(),
        Broadcast::Trailing => {
            let period = bd.len();
            ad.iter()
                .enumerate()
                .map(|(i, &x)| f(x, bd[i % period]))
                .collect()
        }
    };
    Ok(Tensor::from_parts(a.shape().to_vec(), out))
}

pub fn add<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    zip_with("add", a, b, |x, y| x + y)
}

pub fn sub<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(mismatch("sub", a, b));
    }
    zip_with("sub", a, b, |x, y| x - y)
}

pub fn mul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(mismatch("mul", a, b));
    }
    zip_with("mul", a, b, |x, y| x * y)
}

pub fn scale<T: Scalar>(a: &Tensor<T>, s: T) -> Tensor<T> {
    a.map(|x| x * s)
}

/// Sum `g` over leading dimensions so that it has `target`'s size.
pub(crate) fn reduce_to<T: Scalar>(g: &[T], kind: Broadcast, target_len: usize) -> Vec<T> {
    match kind {
        Broadcast::Same => g.to_vec(),
        Broadcast::Scalar => vec![g.iter().copied().sum()],
        Broadcast::Trailing => {
            let mut out = vec![T::ZERO; target_len];
            for chunk in g.chunks(target_len) {
                for (o, &v) in out.iter_mut().zip(chunk) {
                    *o += v;
                }
            }
            out
        }
    }
}

#[inline]
pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::ZERO {
        T::ONE / (T::ONE + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::ONE + e)
    }
}

pub fn silu<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v * sigmoid(v))
}

/// d silu / dx evaluated at each input.
pub(crate) fn silu_grad<T: Scalar>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::ONE + x * (T::ONE - s))
}

/// RMS normalisation over the last dimension. Returns the output and the
/// per-row inverse RMS for the backward pass.
pub(crate) fn rmsnorm_fwd<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<(Tensor<T>, Vec<T>)> {
    if w.shape().len() != 1 || x.last_dim() != w.numel() {
        return Err(mismatch("rmsnorm", x, w));
    }
    let d = w.numel();
    let eps = T::from_f64(RMS_EPS);
    let dn = T::from_f64(d as f64);
    let wd = w.data();
    let mut out = Vec::with_capacity(x.numel());
    let mut inv = Vec::with_capacity(x.leading());
    for row in x.data().chunks(d) {
        let ms = row.iter().map(|&v| v * v).sum::<T>() / dn;
        let r = T::ONE / (ms + eps).sqrt();
        inv.push(r);
        out.extend(row.iter().zip(wd).map(|(&v, &g)| v * r * g));
    }
    Ok((Tensor::from_parts(x.shape().to_vec(), out), inv))
}

pub fn rmsnorm<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>) -> Result<Tensor<T>> {
    rmsnorm_fwd(x, w).map(|(y, _)| y)
}

/// Row-wise log-softmax of a `[rows × cols]` buffer.
pub(crate) fn log_softmax_rows<T: Scalar>(data: &[T], cols: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(data.len());
    for row in data.chunks(cols) {
        let max = row
            .iter()
            .copied()
            .fold(row[0], |m, v| if v > m { v } else { m });
        let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
        out.extend(row.iter().map(|&v| v - lse));
    }
    out
}

/// Mean negative log-likelihood over the positions whose mask is set.
/// Returns the loss, the log-probabilities and the number of counted rows.
pub(crate) fn cross_entropy_fwd<T: Scalar>(
    logits: &Tensor<T>,
    targets: &[usize],
    mask: Option<&[bool]>,
) -> Result<(T, Vec<T>, usize)> {
    let v = logits.last_dim();
    let rows = logits.leading();
    if targets.len() != rows || mask.is_some_and(|m| m.len() != rows) {
        return Err(TensorError::Invalid {
            op: "cross_entropy",
            msg: format!("{} targets for {} rows", targets.len(), rows),
        });
    }
    let counted = |i: usize| mask.map_or(true, |m| m[i]);
    for (i, &t) in targets.iter().enumerate() {
        if counted(i) && t >= v {
            return Err(TensorError::TargetOutOfRange { id: t, vocab: v });
        }
    }
    let logp = log_softmax_rows(logits.data(), v);
    let mut total = T::ZERO;
    let mut count = 0usize;
    for (i, &t) in targets.iter().enumerate() {
        if counted(i) {
            total -= logp[i * v + t];
            count += 1;
        }
    }
    let loss = if count == 0 {
        T::ZERO
    } else {
        total / T::from_f64(count as f64)
    };
    Ok((loss, logp, count))
}

pub fn cross_entropy_mean<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<T> {
    cross_entropy_fwd(logits, targets, None).map(|(l, _, _)| l)
}

/// Row gather from an embedding table `[rows × d]`.
pub(crate) fn embedding_fwd<T: Scalar>(table: &Tensor<T>, ids: &[usize]) -> Result<Tensor<T>> {
    if table.shape().len() != 2 {
        return Err(TensorError::Rank {
            op: "embedding",
            expected: 2,
            shape: table.shape().to_vec(),
        });
    }
    let (rows, d) = (table.shape()[0], table.shape()[1]);
    let mut out = Vec::with_capacity(ids.len() * d);
    for &id in ids {
        if id >= rows {
            return Err(TensorError::IndexOutOfRange { id, rows });
        }
        out.extend_from_slice(&table.data()[id * d..(id + 1) * d]);
    }
    Ok(Tensor::from_parts(vec![ids.len(), d], out))
}

/// Geometry of a batched multi-head causal attention call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttnShape {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
    pub head_dim: usize,
}

impl AttnShape {
    pub fn width(&self) -> usize {
        self.heads * self.head_dim
    }
}

/// Causal softmax attention. `q`, `k`, `v` are `[batch·seq × heads·head_dim]`.
/// Returns the output and the attention probabilities `[batch, heads, seq, seq]`.
pub(crate) fn attention_fwd<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    s: AttnShape,
) -> (Vec<T>, Vec<T>) {
    let (t, hd, w) = (s.seq, s.head_dim, s.width());
    let scale = T::ONE / T::from_f64(hd as f64).sqrt();
    let mut out = vec![T::ZERO; s.batch * t * w];
    let mut probs = vec![T::ZERO; s.batch * s.heads * t * t];
    let mut scores = vec![T::ZERO; t * t];
    for b in 0..s.batch {
        let base = b * t * w;
        for h in 0..s.heads {
            let off = base + h * hd;
            // scores = q_h k_hᵀ
            let qv = strided(&q[off..], t, hd, w);
            let kv = strided(&k[off..], t, hd, w);
            gemm_strided(qv, kv.transpose(), &mut scores, t, false);
            let p = &mut probs[(b * s.heads + h) * t * t..][..t * t];
            for i in 0..t {
                let row = &scores[i * t..i * t + i + 1];
                let mut max = row[0] * scale;
                for &x in row {
                    if x * scale > max {
                        max = x * scale;
                    }
                }
                let mut denom = T::ZERO;
                for j in 0..=i {
                    let e = (scores[i * t + j] * scale - max).exp();
                    p[i * t + j] = e;
                    denom += e;
                }
                for j in 0..=i {
                    p[i * t + j] = p[i * t + j] / denom;
                }
            }
            let vv = strided(&v[off..], t, hd, w);
            let pv = Strided {
                data: p,
                rows: t,
                cols: t,
                rs: t as isize,
                cs: 1,
            };
            gemm_into_strided(pv, vv, &mut out[off..], t, hd, w, false);
        }
    }
    (out, probs)
}

/// Gradients of [`attention_fwd`] with respect to q, k and v.
pub(crate) fn attention_bwd<T: Scalar>(
    grad_out: &[T],
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    s: AttnShape,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let (t, hd, w) = (s.seq, s.head_dim, s.width());
    let scale = T::ONE / T::from_f64(hd as f64).sqrt();
    let n = s.batch * t * w;
    let (mut dq, mut dk, mut dv) = (vec![T::ZERO; n], vec![T::ZERO; n], vec![T::ZERO; n]);
    let mut dp = vec![T::ZERO; t * t];
    for b in 0..s.batch {
        let base = b * t * w;
        for h in 0..s.heads {
            let off = base + h * hd;
            let p = &probs[(b * s.heads + h) * t * t..][..t * t];
            let pv = Strided {
                data: p,
                rows: t,
                cols: t,
                rs: t as isize,
                cs: 1,
            };
            let go = strided(&grad_out[off..], t, hd, w);
            // dV = Pᵀ dO
            gemm_into_strided(pv.transpose(), go, &mut dv[off..], t, hd, w, false);
            // dP = dO Vᵀ
            let vv = strided(&v[off..], t, hd, w);
            gemm_strided(go, vv.transpose(), &mut dp, t, false);
            // dS = P ⊙ (dP − rowsum(dP ⊙ P)) · scale
            for i in 0..t {
                let mut dot = T::ZERO;
                for j in 0..=i {
                    dot += dp[i * t + j] * p[i * t + j];
                }
                for j in 0..t {
                    dp[i * t + j] = if j <= i {
                        p[i * t + j] * (dp[i * t + j] - dot) * scale
                    } else {
                        T::ZERO
                    };
                }
            }
            let ds = Strided {
                data: &dp,
                rows: t,
                cols: t,
                rs: t as isize,
                cs: 1,
            };
            let kv = strided(&k[off..], t, hd, w);
            let qv = strided(&q[off..], t, hd, w);
            gemm_into_strided(ds, kv, &mut dq[off..], t, hd, w, false);
            gemm_into_strided(ds.transpose(), qv, &mut dk[off..], t, hd, w, false);
        }
    }
    (dq, dk, dv)
}

#[derive(Clone, Copy)]
struct Strided<'a, T> {
    data: &'a [T],
    rows: usize,
    cols: usize,
    rs: isize,
    cs: isize,
}

impl<T> Strided<'_, T> {
    fn transpose(self) -> Self {
        Self {
            rows: self.cols,
            cols: self.rows,
            rs: self.cs,
            cs: self.rs,
            ..self
        }
    }
}

fn strided<T>(data: &[T], rows: usize, cols: usize, row_stride: usize) -> Strided<'_, T> {
    Strided {
        data,
        rows,
        cols,
        rs: row_stride as isize,
        cs: 1,
    }
}

/// Dense `[m × n]` output with row stride `n`.
fn gemm_strided<T: Scalar>(a: Strided<'_, T>, b: Strided<'_, T>, out: &mut [T], n: usize, acc: bool) {
    gemm_into_strided(a, b, out, a.rows, n, n, acc)
}

fn gemm_into_strided<T: Scalar>(
    a: Strided<'_, T>,
    b: Strided<'_, T>,
    out: &mut [T],
    m: usize,
    n: usize,
    out_row_stride: usize,
    acc: bool,
) {
    debug_assert_eq!(a.rows, m);
    debug_assert_eq!(b.cols, n);
    debug_assert_eq!(a.cols, b.rows);
    debug_assert!(m == 0 || out.len() >= (m - 1) * out_row_stride + n);
    let beta = if acc { T::ONE } else { T::ZERO };
    // SAFETY: every view was sliced from a buffer large enough for its
    // rows/cols/strides, and `out` covers the m×n strided block.
    unsafe {
        T::gemm(
            m,
            a.cols,
            n,
            T::ONE,
            a.data.as_ptr(),
            a.rs,
            a.cs,
            b.data.as_ptr(),
            b.rs,
            b.cs,
            beta,
            out.as_mut_ptr(),
            out_row_stride as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn t2(rows: &[&[f32]]) -> Tensor<f32> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_hand_example() {
        let a = t2(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let b = t2(&[&[5.0, 6.0], &[7.0, 8.0]]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_identity() {
        let b = t2(&[&[0.3, -1.5], &[2.25, 7.0]]);
        let c = matmul(&Tensor::eye(2), &b).unwrap();
        assert!(c.bit_eq(&b));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let a = Tensor::<f32>::zeros(&[2, 3]);
        let b = Tensor::<f32>::zeros(&[2, 3]);
        let err = matmul(&a, &b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
        assert!(matches!(err, TensorError::ShapeMismatch { .. }));
    }

    #[test]
    fn matmul_nt_matches_transpose() {
        let a = t2(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]);
        let b = t2(&[&[1.0, 0.5, -1.0], &[2.0, 1.0, 0.0]]);
        let direct = matmul(&a, &transpose(&b).unwrap()).unwrap();
        let nt = matmul_nt(&a, &b).unwrap();
        assert_eq!(direct.data(), nt.data());
    }

    #[test]
    fn silu_values() {
        let x = Tensor::<f64>::new(vec![3], vec![0.0, 1.0, -20.0]).unwrap();
        let y = silu(&x);
        assert_eq!(y.data()[0], 0.0);
        assert_relative_eq!(y.data()[1], 1.0 / (1.0 + (-1.0f64).exp()), epsilon = 1e-15);
        assert_relative_eq!(y.data()[1], 0.731058578630, epsilon = 1e-9);
        assert!(y.data()[2] < 0.0 && y.data()[2] > -1e-7);
        assert_relative_eq!(y.data()[2], -20.0 * 2.061_153_618e-9, max_relative = 1e-6);
    }

    #[test]
    fn rmsnorm_constant_row() {
        let x = Tensor::<f64>::full(&[1, 8], 3.0);
        let y = rmsnorm(&x, &Tensor::ones(&[8])).unwrap();
        let expect = 3.0 / (9.0f64 + RMS_EPS).sqrt();
        for &v in y.data() {
            assert_relative_eq!(v, expect, epsilon = 1e-12);
            assert!((v - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn rmsnorm_zero_cases() {
        let x = Tensor::<f32>::zeros(&[2, 4]);
        assert!(rmsnorm(&x, &Tensor::ones(&[4]))
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        let x = Tensor::<f32>::full(&[2, 4], 1.5);
        assert!(rmsnorm(&x, &Tensor::zeros(&[4]))
            .unwrap()
            .data()
            .iter()
            .all(|&v| v == 0.0));
        assert!(rmsnorm(&x, &Tensor::zeros(&[3])).is_err());
    }

    #[test]
    fn cross_entropy_examples() {
        let logits = Tensor::<f64>::zeros(&[3, 256]);
        let l = cross_entropy_mean(&logits, &[0, 17, 255]).unwrap();
        assert_relative_eq!(l, 256f64.ln(), epsilon = 1e-12);
        assert_relative_eq!(l, 5.5452, epsilon = 1e-4);

        let mut hot = vec![0.0f64; 2 * 10];
        hot[3] = 30.0;
        hot[10 + 7] = 30.0;
        let l = cross_entropy_mean(&Tensor::new(vec![2, 10], hot).unwrap(), &[3, 7]).unwrap();
        assert!(l < 1e-11);

        let two = Tensor::<f64>::new(vec![1, 2], vec![0.0, 3f64.ln()]).unwrap();
        let l = cross_entropy_mean(&two, &[1]).unwrap();
        assert_relative_eq!(l, -(0.75f64).ln(), epsilon = 1e-12);
        assert_relative_eq!(l, 0.2877, epsilon = 1e-4);
    }

    #[test]
    fn cross_entropy_rejects_bad_target() {
        let logits = Tensor::<f32>::zeros(&[1, 4]);
        assert_eq!(
            cross_entropy_mean(&logits, &[4]).unwrap_err(),
            TensorError::TargetOutOfRange { id: 4, vocab: 4 }
        );
    }

    #[test]
    fn attention_single_position_returns_value() {
        let s = AttnShape {
            batch: 1,
            seq: 1,
            heads: 2,
            head_dim: 2,
        };
        let q = vec![0.3f64, -0.2, 1.0, 2.0];
        let k = vec![0.1, 0.4, -1.0, 0.5];
        let v = vec![1.0, 2.0, 3.0, 4.0];
        let (out, probs) = attention_fwd(&q, &k, &v, s);
        assert_eq!(out, v);
        assert_eq!(probs, vec![1.0, 1.0]);
    }

    #[test]
    fn trailing_broadcast_add() {
        let a = Tensor::<f32>::zeros(&[2, 3, 2]);
        let b = Tensor::<f32>::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let c = add(&a, &b).unwrap();
        assert_eq!(&c.data()[6..], b.data());
        assert!(add(&b, &a).is_err());
    }
}
