//! Wengert-list autodiff. Every op evaluates eagerly and appends a node; the
//! node order is a topological order by construction.

use std::collections::BTreeMap;

use super::kernels::{self, AttnShape, Broadcast, MatView};
use super::num_like::Scalar;
use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var, Broadcast),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleBy(Var, Var),
    Silu(Var),
    RmsNorm { x: Var, w: Var, inv: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, shape: AttnShape, probs: Vec<T> },
    CrossEntropy { logits: Var, targets: Vec<usize>, mask: Option<Vec<bool>>, logp: Vec<T>, count: usize },
    Sum(Var),
    SumSquares(Var),
    Mse(Var, Var),
}

#[derive(Debug)]
struct Node<T: Scalar> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// A recording of one forward computation.
#[derive(Debug)]
pub struct Tape<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients of a scalar loss with respect to every leaf that requires them.
#[derive(Debug, Clone)]
pub struct Gradients<T: Scalar = f32> {
    grads: BTreeMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(&v)
    }

    pub fn contains(&self, v: Var) -> bool {
        self.grads.contains_key(&v)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Gradient for `v`, or zeros shaped like `like` if the leaf was not
    /// reached from the loss.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor<T>) -> Tensor<T> {
        self.grads
            .get(&v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Record a leaf. It is differentiated iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let ng = tensor.requires_grad();
        self.push(tensor, Op::Leaf, ng)
    }

    /// Record a leaf that is never differentiated.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor.with_requires_grad(false), Op::Leaf, false)
    }

    /// Record a differentiated leaf regardless of the tensor's flag.
    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.push(tensor.with_requires_grad(true), Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::matmul_nt(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::MatMulNt(a, b), ng))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = kernels::transpose(self.value(a))?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Transpose(a), ng))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape)?;
        let ng = self.ng(a);
        Ok(self.push(out, Op::Reshape(a), ng))
    }

    /// Elementwise sum; `b` may match `a`, match its trailing dimensions, or be a scalar.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let bc = kernels::broadcast_kind("add", self.value(a), self.value(b))?;
        let out = kernels::add(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b, bc), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::sub(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Sub(a, b), ng))
    }

    /// Elementwise (Hadamard) product of equal shapes.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = kernels::mul(self.value(a), self.value(b))?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    /// Multiply by a fixed constant.
    pub fn scale(&mut self, a: Var, s: T) -> Var {
        let out = kernels::scale(self.value(a), s);
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, s), ng)
    }

    /// Multiply by a one-element tensor that may itself be differentiated.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(TensorError::ShapeMismatch {
                op: "scale_by",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(s).to_vec(),
            });
        }
        let k = self.value(s).item();
        let out = kernels::scale(self.value(a), k);
        let ng = self.ng(a) || self.ng(s);
        Ok(self.push(out, Op::ScaleBy(a, s), ng))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let out = kernels::silu(self.value(a));
        let ng = self.ng(a);
        self.push(out, Op::Silu(a), ng)
    }

    pub fn rmsnorm(&mut self, x: Var, w: Var) -> Result<Var> {
        let (out, inv) = kernels::rmsnorm_fwd(self.value(x), self.value(w))?;
        let ng = self.ng(x) || self.ng(w);
        Ok(self.push(out, Op::RmsNorm { x, w, inv }, ng))
    }

    /// Gather rows of `table` → `[ids.len() × d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = kernels::embedding_fwd(self.value(table), ids)?;
        let ng = self.ng(table);
        Ok(self.push(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            ng,
        ))
    }

    /// Multi-head causal self-attention over `[batch·seq × heads·head_dim]` inputs.
    pub fn causal_attention(&mut self, q: Var, k: Var, v: Var, shape: AttnShape) -> Result<Var> {
        let expect = [shape.batch * shape.seq, shape.width()];
        for x in [q, k, v] {
            if self.value(x).leading() != expect[0] || self.value(x).last_dim() != expect[1] {
                return Err(TensorError::ShapeMismatch {
                    op: "causal_attention",
                    lhs: self.shape(x).to_vec(),
                    rhs: expect.to_vec(),
                });
            }
        }
        let (out, probs) = kernels::attention_fwd(
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
            shape,
        );
        let out = Tensor::from_parts(self.shape(q).to_vec(), out);
        let ng = self.ng(q) || self.ng(k) || self.ng(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            },
            ng,
        ))
    }

    /// Mean next-token cross-entropy over all rows.
    pub fn cross_entropy_mean(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        self.cross_entropy_masked(logits, targets, None)
    }

    /// Mean cross-entropy over rows whose mask entry is `true`.
    pub fn cross_entropy_masked(
        &mut self,
        logits: Var,
        targets: &[usize],
        mask: Option<&[bool]>,
    ) -> Result<Var> {
        let (loss, logp, count) = kernels::cross_entropy_fwd(self.value(logits), targets, mask)?;
        let ng = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.map(|m| m.to_vec()),
                logp,
                count,
            },
            ng,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().copied().sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::Sum(a), ng)
    }

    /// `‖a‖²`, summed over every element.
    pub fn sum_squares(&mut self, a: Var) -> Var {
        let s: T = self.value(a).data().iter().map(|&x| x * x).sum();
        let ng = self.ng(a);
        self.push(Tensor::scalar(s), Op::SumSquares(a), ng)
    }

    /// Mean squared difference over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: "mse",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let n = T::from_f64(self.value(a).numel().max(1) as f64);
        let s: T = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(Tensor::scalar(s / n), Op::Mse(a, b), ng))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(TensorError::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![T::ONE]);
        let mut out = BTreeMap::new();

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = adj[idx].take() else { continue };
            if let Op::Leaf = node.op {
                out.insert(Var(idx), Tensor::from_parts(node.value.shape().to_vec(), g));
                continue;
            }
            self.propagate(idx, &g, &mut adj);
        }
        Ok(Gradients { grads: out })
    }

    fn accumulate(&self, adj: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.ng(v) {
            return;
        }
        match &mut adj[v.0] {
            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
            slot @ None => *slot = Some(g),
        }
    }

    /// Accumulate `f(&mut buffer)` into the adjoint of `v`, allocating lazily.
    fn accumulate_with(&self, adj: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T], bool)) {
        if !self.ng(v) {
            return;
        }
        let n = self.value(v).numel();
        match &mut adj[v.0] {
            Some(acc) => f(acc, true),
            slot @ None => {
                let mut buf = vec![T::ZERO; n];
                f(&mut buf, false);
                *slot = Some(buf);
            }
        }
    }

    fn propagate(&self, idx: usize, g: &[T], adj: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.leading(), av.last_dim(), bv.shape()[1]);
                let gm = MatView::new(g, m, n);
                // dA = G Bᵀ
                self.accumulate_with(adj, *a, |buf, acc| {
                    kernels::gemm(gm, MatView::new(bv.data(), k, n).t(), buf, acc)
                });
                // dB = Aᵀ G
                self.accumulate_with(adj, *b, |buf, acc| {
                    kernels::gemm(MatView::new(av.data(), m, k).t(), gm, buf, acc)
                });
            }
            Op::MatMulNt(a, b) => {
                // out = A Bᵀ with A [m×k], B [n×k]
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.leading(), av.last_dim(), bv.shape()[0]);
                let gm = MatView::new(g, m, n);
                self.accumulate_with(adj, *a, |buf, acc| {
                    kernels::gemm(gm, MatView::new(bv.data(), n, k), buf, acc)
                });
                self.accumulate_with(adj, *b, |buf, acc| {
                    kernels::gemm(gm.t(), MatView::new(av.data(), m, k), buf, acc)
                });
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let gt = Tensor::from_parts(vec![s[1], s[0]], g.to_vec());
                let back = kernels::transpose(&gt).expect("rank checked in forward");
                self.accumulate(adj, *a, back.into_data());
            }
            Op::Reshape(a) => self.accumulate(adj, *a, g.to_vec()),
            Op::Add(a, b, bc) => {
                self.accumulate(adj, *a, g.to_vec());
                if self.ng(*b) {
                    let len = self.value(*b).numel();
                    self.accumulate(adj, *b, kernels::reduce_to(g, *bc, len));
                }
            }
            Op::Sub(a, b) => {
                self.accumulate(adj, *a, g.to_vec());
                self.accumulate(adj, *b, g.iter().map(|&x| -x).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if self.ng(*a) {
                    self.accumulate(adj, *a, g.iter().zip(bv).map(|(&x, &y)| x * y).collect());
                }
                if self.ng(*b) {
                    self.accumulate(adj, *b, g.iter().zip(av).map(|(&x, &y)| x * y).collect());
                }
            }
            Op::Scale(a, s) => self.accumulate(adj, *a, g.iter().map(|&x| x * *s).collect()),
            Op::ScaleBy(a, s) => {
                let k = self.value(*s).item();
                if self.ng(*a) {
                    self.accumulate(adj, *a, g.iter().map(|&x| x * k).collect());
                }
                if self.ng(*s) {
                    let d: T = g.iter().zip(self.value(*a).data()).map(|(&x, &y)| x * y).sum();
                    self.accumulate(adj, *s, vec![d]);
                }
            }
            Op::Silu(a) => {
                let x = self.value(*a).data();
                let d = g
                    .iter()
                    .zip(x)
                    .map(|(&gi, &xi)| gi * kernels::silu_grad(xi))
                    .collect();
                self.accumulate(adj, *a, d);
            }
            Op::RmsNorm { x, w, inv } => {
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let d = wv.len();
                let dn = T::from_f64(d as f64);
                if self.ng(*x) {
                    let mut dx = Vec::with_capacity(xv.len());
                    for ((row, grow), &r) in xv.chunks(d).zip(g.chunks(d)).zip(inv) {
                        let dot: T = row
                            .iter()
                            .zip(grow)
                            .zip(wv)
                            .map(|((&xi, &gi), &wi)| xi * gi * wi)
                            .sum();
                        let c = r * r * r * dot / dn;
                        dx.extend(
                            row.iter()
                                .zip(grow)
                                .zip(wv)
                                .map(|((&xi, &gi), &wi)| r * gi * wi - xi * c),
                        );
                    }
                    self.accumulate(adj, *x, dx);
                }
                if self.ng(*w) {
                    let mut dw = vec![T::ZERO; d];
                    for ((row, grow), &r) in xv.chunks(d).zip(g.chunks(d)).zip(inv) {
                        for ((o, &xi), &gi) in dw.iter_mut().zip(row).zip(grow) {
                            *o += gi * xi * r;
                        }
                    }
                    self.accumulate(adj, *w, dw);
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.value(*table).last_dim();
                self.accumulate_with(adj, *table, |buf, _| {
                    for (row, &id) in g.chunks(d).zip(ids) {
                        for (o, &v) in buf[id * d..(id + 1) * d].iter_mut().zip(row) {
                            *o += v;
                        }
                    }
                });
            }
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
            } => {
                let (dq, dk, dv) = kernels::attention_bwd(
                    g,
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                    probs,
                    *shape,
                );
                self.accumulate(adj, *q, dq);
                self.accumulate(adj, *k, dk);
                self.accumulate(adj, *v, dv);
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                logp,
                count,
            } => {
                let vocab = self.value(*logits).last_dim();
                let scale = if *count == 0 {
                    T::ZERO
                } else {
                    g[0] / T::from_f64(*count as f64)
                };
                let mut d = vec![T::ZERO; logp.len()];
                for (i, &t) in targets.iter().enumerate() {
                    if mask.as_ref().is_some_and(|m| !m[i]) {
                        continue;
                    }
                    let row = &mut d[i * vocab..(i + 1) * vocab];
                    for (o, &lp) in row.iter_mut().zip(&logp[i * vocab..(i + 1) * vocab]) {
                        *o = lp.exp() * scale;
                    }
                    row[t] -= scale;
                }
                self.accumulate(adj, *logits, d);
            }
            Op::Sum(a) => {
                let n = self.value(*a).numel();
                self.accumulate(adj, *a, vec![g[0]; n]);
            }
            Op::SumSquares(a) => {
                let two = T::from_f64(2.0) * g[0];
                let d = self.value(*a).data().iter().map(|&x| two * x).collect();
                self.accumulate(adj, *a, d);
            }
            Op::Mse(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let c = T::from_f64(2.0) * g[0] / T::from_f64(av.len().max(1) as f64);
                let diff: Vec<T> = av.iter().zip(bv).map(|(&x, &y)| c * (x - y)).collect();
                if self.ng(*b) {
                    self.accumulate(adj, *b, diff.iter().map(|&x| -x).collect());
                }
                self.accumulate(adj, *a, diff);
            }
        }
    }
}
