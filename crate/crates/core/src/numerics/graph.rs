//! Reverse-mode tape. Every op appends a node holding its output value and
//! whatever it needs to replay the chain rule; `backward` walks the tape once
//! in reverse.

use super::kernels::{self, dot, matmul_acc, matmul_at_acc, matmul_bt_acc, softmax_row};
use super::{NumericsError, Real, RngStream, Tensor};

type Result<T> = std::result::Result<T, NumericsError>;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Packed batch of sequences for self-attention: row `b * len + t` is token
/// `t` of sequence `b`; keys with `key_mask == false` receive no attention.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionLayout {
    pub batch: usize,
    pub len: usize,
    pub key_mask: Vec<bool>,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Dropout(Var, Vec<T>),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        layout: AttentionLayout,
        heads: usize,
        probs: Vec<T>,
    },
    SelectRows(Var, Vec<usize>),
    Reshape(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<Option<usize>>,
        probs: Vec<T>,
        count: usize,
    },
    CosineMatrix {
        a: Var,
        b: Var,
        norms_a: Vec<T>,
        norms_b: Vec<T>,
    },
    Sum(Var),
    Mean(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single-threaded computation tape. Build one per forward pass.
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn mismatch(op: &'static str, left: &[usize], right: &[usize]) -> NumericsError {
    NumericsError::ShapeMismatch {
        op,
        left: left.to_vec(),
        right: right.to_vec(),
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.nodes[v.0].value.shape();
        if s.len() != 2 {
            return Err(mismatch(op, s, &[0, 0]));
        }
        Ok((s[0], s[1]))
    }

    /// Trainable leaf; gradients are accumulated for it.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` loss with respect to `v`, if any flowed.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix("matmul", a)?;
        let (k2, n) = self.matrix("matmul", b)?;
        if k != k2 {
            return Err(mismatch("matmul", &[m, k], &[k2, n]));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    /// `a[m,k] * b[n,k]^T`
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix("matmul_bt", a)?;
        let (n, k2) = self.matrix("matmul_bt", b)?;
        if k != k2 {
            return Err(mismatch("matmul_bt", &[m, k], &[n, k2]));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_bt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMulBt(a, b), rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(mismatch(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Add(a, b), rg))
    }

    /// Broadcast-add a `[n]` bias to every row of `a[m,n]`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (_, n) = self.matrix("add_row", a)?;
        let bs = self.value(bias).shape();
        if bs != [n] {
            return Err(mismatch("add_row", self.value(a).shape(), bs));
        }
        let b = self.value(bias).data();
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + b[i % n])
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a, bias]);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddRow(a, bias), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<T> = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let shape = self.value(a).shape().to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&x| x * c).collect())?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Scale(a, c), rg))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let out = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|&x| kernels::gelu(x)).collect(),
        )?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Gelu(a), rg))
    }

    /// Inverted dropout. Returns `a` untouched when `p == 0`.
    pub fn dropout(&mut self, a: Var, p: f64, rng: &mut RngStream) -> Result<Var> {
        if p <= 0.0 {
            return Ok(a);
        }
        let keep = T::c(1.0 / (1.0 - p));
        let t = self.value(a);
        let mask: Vec<T> = (0..t.len())
            .map(|_| if rng.bernoulli(p) { T::zero() } else { keep })
            .collect();
        let out: Vec<T> = t.data().iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let shape = t.shape().to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Dropout(a, mask), rg))
    }

    /// Gather rows of `table[V,d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (v, d) = self.matrix("embedding", table)?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(NumericsError::IndexOutOfRange {
                    op: "embedding",
                    index: id,
                    bound: v,
                });
            }
            out.extend_from_slice(self.value(table).row(id));
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Layer normalization over the last axis.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, d) = self.matrix("layer_norm", x)?;
        for p in [gamma, beta] {
            if self.value(p).shape() != [d] {
                return Err(mismatch("layer_norm", &[m, d], self.value(p).shape()));
            }
        }
        let (xs, g, b) = (
            self.value(x).data(),
            self.value(gamma).data(),
            self.value(beta).data(),
        );
        let mut xhat = vec![T::zero(); m * d];
        let mut rstd = vec![T::zero(); m];
        let mut out = vec![T::zero(); m * d];
        let dn = T::c(d as f64);
        for i in 0..m {
            let row = &xs[i * d..(i + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let r = T::one() / (var + T::c(eps)).sqrt();
            rstd[i] = r;
            for j in 0..d {
                let h = (row[j] - mean) * r;
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(vec![m, d], out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let c = t.cols();
        let mut out = t.data().to_vec();
        for row in out.chunks_mut(c) {
            softmax_row(row);
        }
        let shape = t.shape().to_vec();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Softmax(a), rg))
    }

    /// Multi-head scaled dot-product attention over packed sequences.
    /// `q`, `k`, `v` are `[batch * len, d]`; heads split the columns.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        layout: &AttentionLayout,
        heads: usize,
    ) -> Result<Var> {
        let (rows, d) = self.matrix("attention", q)?;
        for other in [k, v] {
            let s = self.value(other).shape();
            if s != [rows, d] {
                return Err(mismatch("attention", &[rows, d], s));
            }
        }
        let (bsz, len) = (layout.batch, layout.len);
        if rows != bsz * len || layout.key_mask.len() != rows || heads == 0 || d % heads != 0 {
            return Err(mismatch("attention", &[rows, d], &[bsz, len, heads]));
        }
        let dh = d / heads;
        let scale = T::c(1.0 / (dh as f64).sqrt());
        let (qs, ks, vs) = (
            self.value(q).data(),
            self.value(k).data(),
            self.value(v).data(),
        );
        let mut probs = vec![T::zero(); bsz * heads * len * len];
        let mut out = vec![T::zero(); rows * d];
        for b in 0..bsz {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..len {
                    let qi = &qs[(b * len + i) * d + off..(b * len + i) * d + off + dh];
                    let p = &mut probs[((b * heads + h) * len + i) * len..][..len];
                    for j in 0..len {
                        p[j] = if layout.key_mask[b * len + j] {
                            let kj = &ks[(b * len + j) * d + off..(b * len + j) * d + off + dh];
                            dot(qi, kj) * scale
                        } else {
                            T::neg_infinity()
                        };
                    }
                    softmax_row(p);
                    let o = &mut out[(b * len + i) * d + off..(b * len + i) * d + off + dh];
                    for j in 0..len {
                        if p[j] != T::zero() {
                            let vj = &vs[(b * len + j) * d + off..(b * len + j) * d + off + dh];
                            kernels::axpy(p[j], vj, o);
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[q, k, v]);
        Ok(self.push(
            Tensor::new(vec![rows, d], out)?,
            Op::Attention {
                q,
                k,
                v,
                layout: layout.clone(),
                heads,
                probs,
            },
            rg,
        ))
    }

    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, d) = self.matrix("select_rows", x)?;
        let mut out = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= m {
                return Err(NumericsError::IndexOutOfRange {
                    op: "select_rows",
                    index: i,
                    bound: m,
                });
            }
            out.extend_from_slice(self.value(x).row(i));
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(vec![idx.len(), d], out)?,
            Op::SelectRows(x, idx.to_vec()),
            rg,
        ))
    }

    /// Same data under a new shape of equal size.
    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let data = self.value(x).data().to_vec();
        let out = Tensor::new(shape.to_vec(), data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Mean negative log-likelihood over rows carrying a label; rows with
    /// `None` are ignored. Evaluates to 0 when no row is labeled.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[Option<usize>]) -> Result<Var> {
        let (m, c) = self.matrix("cross_entropy", logits)?;
        if labels.len() != m {
            return Err(mismatch("cross_entropy", &[m, c], &[labels.len()]));
        }
        let z = self.value(logits).data();
        let mut probs = z.to_vec();
        let mut total = T::zero();
        let mut count = 0usize;
        for (r, row) in probs.chunks_mut(c).enumerate() {
            if let Some(y) = labels[r] {
                if y >= c {
                    return Err(NumericsError::IndexOutOfRange {
                        op: "cross_entropy",
                        index: y,
                        bound: c,
                    });
                }
                let zr = &z[r * c..(r + 1) * c];
                let max = zr.iter().fold(T::neg_infinity(), |a, &b| a.max(b));
                let lse = max + zr.iter().map(|&v| (v - max).exp()).sum::<T>().ln();
                total += lse - zr[y];
                count += 1;
            }
            softmax_row(row);
        }
        let value = if count == 0 {
            T::zero()
        } else {
            total / T::c(count as f64)
        };
        let rg = self.rg(&[logits]) && count > 0;
        Ok(self.push(
            Tensor::scalar(value),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
                count,
            },
            rg,
        ))
    }

    /// Pairwise cosine similarity between rows of `a[m,d]` and `b[n,d]`.
    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, d) = self.matrix("cosine_matrix", a)?;
        let (n, d2) = self.matrix("cosine_matrix", b)?;
        if d != d2 {
            return Err(mismatch("cosine_matrix", &[m, d], &[n, d2]));
        }
        let norms = |t: &Tensor<T>, rows: usize| -> Result<Vec<T>> {
            (0..rows)
                .map(|i| {
                    let r = t.row(i);
                    let nrm = dot(r, r).sqrt();
                    if nrm > T::zero() {
                        Ok(nrm)
                    } else {
                        Err(NumericsError::ZeroNorm {
                            op: "cosine_matrix",
                            row: i,
                        })
                    }
                })
                .collect()
        };
        let (ta, tb) = (self.value(a), self.value(b));
        let norms_a = norms(ta, m)?;
        let norms_b = norms(tb, n)?;
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] = dot(ta.row(i), tb.row(j)) / (norms_a[i] * norms_b[j]);
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::CosineMatrix {
                a,
                b,
                norms_a,
                norms_b,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().copied().sum::<T>();
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().copied().sum::<T>() / T::c(t.len() as f64);
        let rg = self.rg(&[a]);
        Ok(self.push(Tensor::scalar(s), Op::Mean(a), rg))
    }

    /// Reverse pass from a scalar `loss`. Gradients of earlier calls are discarded.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.value(loss).shape().to_vec();
        if !self.value(loss).is_scalar() {
            return Err(NumericsError::NonScalar(shape));
        }
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        grads.clear();
        grads.resize_with(nodes.len(), || None);
        grads[loss.0] = Some(vec![T::one()]);

        fn slot<'a, T: Real>(
            grads: &'a mut [Option<Vec<T>>],
            nodes: &[Node<T>],
            v: Var,
        ) -> Option<&'a mut Vec<T>> {
            if !nodes[v.0].requires_grad {
                return None;
            }
            let n = nodes[v.0].value.len();
            Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
        }

        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                    let n = nodes[b.0].value.shape()[1];
                    if let Some(da) = slot(grads, nodes, *a) {
                        matmul_bt_acc(&g, nodes[b.0].value.data(), da, m, n, k);
                    }
                    if let Some(db) = slot(grads, nodes, *b) {
                        matmul_at_acc(nodes[a.0].value.data(), &g, db, m, k, n);
                    }
                }
                Op::MatMulBt(a, b) => {
                    let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                    let n = nodes[b.0].value.shape()[0];
                    if let Some(da) = slot(grads, nodes, *a) {
                        matmul_acc(&g, nodes[b.0].value.data(), da, m, n, k);
                    }
                    if let Some(db) = slot(grads, nodes, *b) {
                        matmul_at_acc(&g, nodes[a.0].value.data(), db, m, n, k);
                    }
                }
                Op::Add(a, b) => {
                    for v in [a, b] {
                        if let Some(dv) = slot(grads, nodes, *v) {
                            kernels::axpy(T::one(), &g, dv);
                        }
                    }
                }
                Op::AddRow(a, bias) => {
                    if let Some(da) = slot(grads, nodes, *a) {
                        kernels::axpy(T::one(), &g, da);
                    }
                    if let Some(db) = slot(grads, nodes, *bias) {
                        let n = db.len();
                        for row in g.chunks(n) {
                            kernels::axpy(T::one(), row, db);
                        }
                    }
                }
                Op::Mul(a, b) => {
                    if let Some(da) = slot(grads, nodes, *a) {
                        for ((d, &gi), &bv) in da.iter_mut().zip(&g).zip(nodes[b.0].value.data()) {
                            *d += gi * bv;
                        }
                    }
                    if let Some(db) = slot(grads, nodes, *b) {
                        for ((d, &gi), &av) in db.iter_mut().zip(&g).zip(nodes[a.0].value.data()) {
                            *d += gi * av;
                        }
                    }
                }
                Op::Scale(a, c) => {
                    if let Some(da) = slot(grads, nodes, *a) {
                        kernels::axpy(*c, &g, da);
                    }
                }
                Op::Gelu(a) => {
                    if let Some(da) = slot(grads, nodes, *a) {
                        for ((d, &gi), &x) in da.iter_mut().zip(&g).zip(nodes[a.0].value.data()) {
                            *d += gi * kernels::gelu_grad(x);
                        }
                    }
                }
                Op::Dropout(a, mask) => {
                    if let Some(da) = slot(grads, nodes, *a) {
                        for ((d, &gi), &mk) in da.iter_mut().zip(&g).zip(mask) {
                            *d += gi * mk;
                        }
                    }
                }
                Op::Embedding { table, ids } => {
                    if let Some(dt) = slot(grads, nodes, *table) {
                        let d = nodes[table.0].value.cols();
                        for (r, &id) in ids.iter().enumerate() {
                            kernels::axpy(T::one(), &g[r * d..(r + 1) * d], &mut dt[id * d..(id + 1) * d]);
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gamma,
                    beta,
                    xhat,
                    rstd,
                } => {
                    let d = nodes[gamma.0].value.len();
                    if let Some(dg) = slot(grads, nodes, *gamma) {
                        for (gr, hr) in g.chunks(d).zip(xhat.chunks(d)) {
                            for j in 0..d {
                                dg[j] += gr[j] * hr[j];
                            }
                        }
                    }
                    if let Some(db) = slot(grads, nodes, *beta) {
                        for gr in g.chunks(d) {
                            kernels::axpy(T::one(), gr, db);
                        }
                    }
                    if let Some(dx) = slot(grads, nodes, *x) {
                        let gm = nodes[gamma.0].value.data();
                        let dn = T::c(d as f64);
                        let mut dxh = vec![T::zero(); d];
                        for i in 0..rstd.len() {
                            let (gr, hr) = (&g[i * d..(i + 1) * d], &xhat[i * d..(i + 1) * d]);
                            for j in 0..d {
                                dxh[j] = gr[j] * gm[j];
                            }
                            let m1 = dxh.iter().copied().sum::<T>() / dn;
                            let m2 = dot(&dxh, hr) / dn;
                            for j in 0..d {
                                dx[i * d + j] += rstd[i] * (dxh[j] - m1 - hr[j] * m2);
                            }
                        }
                    }
                }
                Op::Softmax(a) => {
                    if let Some(da) = slot(grads, nodes, *a) {
                        let y = node.value.data();
                        let c = node.value.cols();
                        for r in 0..y.len() / c {
                            let (yr, gr) = (&y[r * c..(r + 1) * c], &g[r * c..(r + 1) * c]);
                            let s = dot(yr, gr);
                            for j in 0..c {
                                da[r * c + j] += yr[j] * (gr[j] - s);
                            }
                        }
                    }
                }
                Op::Attention {
                    q,
                    k,
                    v,
                    layout,
                    heads,
                    probs,
                } => {
                    let d = node.value.cols();
                    let (bsz, len, heads) = (layout.batch, layout.len, *heads);
                    let dh = d / heads;
                    let scale = T::c(1.0 / (dh as f64).sqrt());
                    let (qs, ks, vs) = (
                        nodes[q.0].value.data(),
                        nodes[k.0].value.data(),
                        nodes[v.0].value.data(),
                    );
                    let rows = bsz * len;
                    let mut dq = vec![T::zero(); rows * d];
                    let mut dk = vec![T::zero(); rows * d];
                    let mut dv = vec![T::zero(); rows * d];
                    let mut ds = vec![T::zero(); len];
                    for b in 0..bsz {
                        for h in 0..heads {
                            let off = h * dh;
                            let at = |r: usize| (b * len + r) * d + off;
                            for i in 0..len {
                                let p = &probs[((b * heads + h) * len + i) * len..][..len];
                                let go = &g[at(i)..at(i) + dh];
                                let mut s = T::zero();
                                for j in 0..len {
                                    if p[j] == T::zero() {
                                        ds[j] = T::zero();
                                        continue;
                                    }
                                    kernels::axpy(p[j], go, &mut dv[at(j)..at(j) + dh]);
                                    let dp = dot(go, &vs[at(j)..at(j) + dh]);
                                    ds[j] = dp;
                                    s += p[j] * dp;
                                }
                                for j in 0..len {
                                    if p[j] == T::zero() {
                                        continue;
                                    }
                                    let dsj = p[j] * (ds[j] - s) * scale;
                                    kernels::axpy(dsj, &ks[at(j)..at(j) + dh], &mut dq[at(i)..at(i) + dh]);
                                    kernels::axpy(dsj, &qs[at(i)..at(i) + dh], &mut dk[at(j)..at(j) + dh]);
                                }
                            }
                        }
                    }
                    for (var, local) in [(q, dq), (k, dk), (v, dv)] {
                        if let Some(dst) = slot(grads, nodes, *var) {
                            kernels::axpy(T::one(), &local, dst);
                        }
                    }
                }
                Op::SelectRows(x, idx_rows) => {
                    if let Some(dx) = slot(grads, nodes, *x) {
                        let d = node.value.cols();
                        for (r, &src) in idx_rows.iter().enumerate() {
                            kernels::axpy(T::one(), &g[r * d..(r + 1) * d], &mut dx[src * d..(src + 1) * d]);
                        }
                    }
                }
                Op::Reshape(x) => {
                    if let Some(dx) = slot(grads, nodes, *x) {
                        kernels::axpy(T::one(), &g, dx);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    labels,
                    probs,
                    count,
                } => {
                    if let Some(dz) = slot(grads, nodes, *logits) {
                        let c = nodes[logits.0].value.cols();
                        let w = g[0] / T::c(*count as f64);
                        for (r, label) in labels.iter().enumerate() {
                            if let Some(y) = label {
                                for j in 0..c {
                                    dz[r * c + j] += w * probs[r * c + j];
                                }
                                dz[r * c + y] -= w;
                            }
                        }
                    }
                }
                Op::CosineMatrix {
                    a,
                    b,
                    norms_a,
                    norms_b,
                } => {
                    let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                    let (m, n, d) = (norms_a.len(), norms_b.len(), ta.cols());
                    let cm = node.value.data();
                    if let Some(da) = slot(grads, nodes, *a) {
                        for i in 0..m {
                            let dst = &mut da[i * d..(i + 1) * d];
                            for j in 0..n {
                                let gij = g[i * n + j];
                                if gij == T::zero() {
                                    continue;
                                }
                                kernels::axpy(gij / (norms_a[i] * norms_b[j]), tb.row(j), dst);
                                kernels::axpy(
                                    -gij * cm[i * n + j] / (norms_a[i] * norms_a[i]),
                                    ta.row(i),
                                    dst,
                                );
                            }
                        }
                    }
                    if let Some(db) = slot(grads, nodes, *b) {
                        for j in 0..n {
                            let dst = &mut db[j * d..(j + 1) * d];
                            for i in 0..m {
                                let gij = g[i * n + j];
                                if gij == T::zero() {
                                    continue;
                                }
                                kernels::axpy(gij / (norms_a[i] * norms_b[j]), ta.row(i), dst);
                                kernels::axpy(
                                    -gij * cm[i * n + j] / (norms_b[j] * norms_b[j]),
                                    tb.row(j),
                                    dst,
                                );
                            }
                        }
                    }
                }
                Op::Sum(a) => {
                    if let Some(da) = slot(grads, nodes, *a) {
                        da.iter_mut().for_each(|d| *d += g[0]);
                    }
                }
                Op::Mean(a) => {
                    if let Some(da) = slot(grads, nodes, *a) {
                        let w = g[0] / T::c(da.len() as f64);
                        da.iter_mut().for_each(|d| *d += w);
                    }
                }
            }
            // Interior gradients are not kept, only leaves'.
        }
        Ok(())
    }
}
