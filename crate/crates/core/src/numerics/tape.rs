//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value. `backward`
//! walks the tape in reverse and accumulates `dLoss/dNode` for every node
//! that transitively depends on a `requires_grad` leaf.

use super::ops::{self, Trans};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
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
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    /// `x[.., n] + bias[n]` broadcast over leading axes.
    AddRowBias(Var, Var),
    /// `x[k·R, n] + tile[R, n]`, the tile repeated `k` times.
    AddTiled(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sum(Var),
    Softmax(Var, usize),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<T>,
        rstd: Vec<T>,
    },
    Gelu(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        geom: AttentionGeometry,
        scale: T,
        probs: Vec<T>,
    },
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    GatherRows(Var, Vec<usize>),
}

/// Layout of a batched multi-head attention call: `batch` sequences of
/// `seq` tokens stacked row-wise, `heads` column groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionGeometry {
    pub batch: usize,
    pub seq: usize,
    pub heads: usize,
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().unwrap_or(&1);
    let rows = shape.iter().product::<usize>().checked_div(cols).unwrap_or(0);
    (rows, cols)
}

impl<T: Scalar> Tape<T> {
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::Numerical(format!(
                "non-finite value produced by {}",
                op_name(&op)
            )));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Registers a trainable input.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    /// Registers a constant input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Gradient of the last `backward` root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Post-softmax probabilities of an attention node, laid out
    /// `[batch][head][query][key]`. Returned by value semantics: callers
    /// receive a plain slice that is not part of the graph.
    pub fn attention_probs(&self, v: Var) -> Option<(&[T], AttentionGeometry)> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, geom, .. } => Some((probs, *geom)),
            _ => None,
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = ops::matmul(self.value(a), self.value(b))?;
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).transpose2()?;
        self.push(value, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).clone().reshape(shape)?;
        self.push(value, Op::Reshape(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::dim(format!("add: {:?} vs {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push(value, Op::Add(a, b), &[a, b])
    }

    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(bias));
        let (_, cols) = rows_cols(xv.shape());
        if bv.len() != cols {
            return Err(Error::dim(format!(
                "bias {:?} vs rows of width {cols}",
                bv.shape()
            )));
        }
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(cols.max(1)) {
            for (d, &b) in row.iter_mut().zip(bv.data()) {
                *d += b;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(value, Op::AddRowBias(x, bias), &[x, bias])
    }

    pub fn add_tiled(&mut self, x: Var, tile: Var) -> Result<Var> {
        let (xv, tv) = (self.value(x), self.value(tile));
        if tv.is_empty() || xv.len() % tv.len() != 0 || xv.shape().last() != tv.shape().last() {
            return Err(Error::dim(format!(
                "add_tiled: {:?} is not a stack of {:?}",
                xv.shape(),
                tv.shape()
            )));
        }
        let mut data = xv.data().to_vec();
        for chunk in data.chunks_mut(tv.len()) {
            for (d, &t) in chunk.iter_mut().zip(tv.data()) {
                *d += t;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(value, Op::AddTiled(x, tile), &[x, tile])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::dim(format!("mul: {:?} vs {:?}", x.shape(), y.shape())));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push(value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale(a, factor), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a), &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let value = ops::softmax(self.value(a), axis)?;
        self.push(value, Op::Softmax(a, axis), &[a])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (value, stats) =
            ops::layer_norm_with_stats(self.value(x), self.value(gain), self.value(bias), eps)?;
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            normalized: stats.normalized,
            rstd: stats.rstd,
        };
        self.push(value, op, &[x, gain, bias])
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let value = self.value(a).map(ops::gelu);
        self.push(value, Op::Gelu(a), &[a])
    }

    /// Mean cross entropy of `logits [B, C]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (loss, probs) = ops::cross_entropy_with_probs(self.value(logits), labels)?;
        let op = Op::CrossEntropy {
            logits,
            labels: labels.to_vec(),
            probs,
        };
        self.push(Tensor::scalar(loss), op, &[logits])
    }

    /// Scaled dot-product attention for every sequence and head.
    ///
    /// `q`, `k`, `v` are `[batch·seq, width]`; head `h` owns columns
    /// `[h·width/heads, (h+1)·width/heads)`. Scores are scaled by
    /// `1/sqrt(width/heads)`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, geom: AttentionGeometry) -> Result<Var> {
        let AttentionGeometry { batch, seq, heads } = geom;
        let (rows, width) = self.value(q).dims2()?;
        if self.value(k).shape() != [rows, width] || self.value(v).shape() != [rows, width] {
            return Err(Error::dim("attention: q, k, v shapes differ"));
        }
        if rows != batch * seq || heads == 0 || width % heads != 0 {
            return Err(Error::dim(format!(
                "attention: [{rows}, {width}] does not split into {batch}x{seq} tokens, {heads} heads"
            )));
        }
        let dh = width / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut probs = vec![T::zero(); batch * heads * seq * seq];
        let mut out = vec![T::zero(); rows * width];
        let mut qh = vec![T::zero(); seq * dh];
        let mut kh = vec![T::zero(); seq * dh];
        let mut vh = vec![T::zero(); seq * dh];
        let mut oh = vec![T::zero(); seq * dh];
        let (qd, kd, vd) = (self.value(q).data(), self.value(k).data(), self.value(v).data());
        for b in 0..batch {
            for h in 0..heads {
                gather_head(qd, width, b * seq, seq, h * dh, dh, &mut qh);
                gather_head(kd, width, b * seq, seq, h * dh, dh, &mut kh);
                gather_head(vd, width, b * seq, seq, h * dh, dh, &mut vh);
                let p = &mut probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                ops::gemm(seq, dh, seq, &qh, Trans::No, &kh, Trans::Yes, T::zero(), p);
                for s in p.iter_mut() {
                    *s *= scale;
                }
                ops::softmax_rows_in_place(p, seq);
                ops::gemm(seq, seq, dh, p, Trans::No, &vh, Trans::No, T::zero(), &mut oh);
                scatter_head(&oh, width, b * seq, seq, h * dh, dh, &mut out, false);
            }
        }
        let value = Tensor::new(vec![rows, width], out)?;
        let op = Op::Attention {
            q,
            k,
            v,
            geom,
            scale,
            probs,
        };
        self.push(value, op, &[q, k, v])
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("concat of nothing"))?;
        let (_, cols) = self.value(*first).dims2()?;
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.value(p).dims2()?;
            if c != cols {
                return Err(Error::dim(format!("concat_rows: width {c} vs {cols}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        self.push(value, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Rows `[start, end)` of a rank-2 node.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let (rows, cols) = self.value(a).dims2()?;
        if start > end || end > rows {
            return Err(Error::dim(format!("slice_rows {start}..{end} of {rows}")));
        }
        let data = self.value(a).data()[start * cols..end * cols].to_vec();
        let value = Tensor::new(vec![end - start, cols], data)?;
        self.push(value, Op::SliceRows(a, start), &[a])
    }

    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let (n, cols) = self.value(a).dims2()?;
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            if r >= n {
                return Err(Error::dim(format!("gather row {r} of {n}")));
            }
            data.extend_from_slice(self.value(a).row(r));
        }
        let value = Tensor::new(vec![rows.len(), cols], data)?;
        self.push(value, Op::GatherRows(a, rows.to_vec()), &[a])
    }

    /// Populates gradients of the scalar `root` for every node that depends
    /// on a trainable leaf. Contributions from repeated uses add up.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![T::one()]);
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        self.grads = grads
            .into_iter()
            .zip(&self.nodes)
            .map(|(g, n)| match g {
                Some(g) if n.requires_grad => Tensor::new(n.value.shape().to_vec(), g).ok(),
                _ => None,
            })
            .collect();
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let nodes = &self.nodes;
        let wants = |v: &Var| nodes[v.0].requires_grad;
        // Accumulates `f(k)` into the gradient of `v` elementwise.
        fn acc<T: Scalar>(dst: &mut [T], src: impl Iterator<Item = T>) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += s;
            }
        }
        match &nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = nodes[a.0].value.dims2()?;
                let (_, n) = nodes[b.0].value.dims2()?;
                if wants(a) {
                    // dA += G·Bᵀ
                    let da = slot(grads, nodes, *a);
                    ops::gemm(m, n, k, g, Trans::No, nodes[b.0].value.data(), Trans::Yes, T::one(), da);
                }
                if wants(b) {
                    // dB += Aᵀ·G
                    let db = slot(grads, nodes, *b);
                    ops::gemm(k, m, n, nodes[a.0].value.data(), Trans::Yes, g, Trans::No, T::one(), db);
                }
            }
            Op::Transpose(a) => {
                if wants(a) {
                    let (r, c) = nodes[a.0].value.dims2()?;
                    let da = slot(grads, nodes, *a);
                    for x in 0..r {
                        for y in 0..c {
                            da[x * c + y] += g[y * r + x];
                        }
                    }
                }
            }
            Op::Reshape(a) | Op::Sum(a) | Op::Scale(a, _) | Op::Gelu(a) if !wants(a) => {}
            Op::Reshape(a) => acc(slot(grads, nodes, *a), g.iter().copied()),
            Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(v) {
                        acc(slot(grads, nodes, *v), g.iter().copied());
                    }
                }
            }
            Op::AddRowBias(x, bias) => {
                if wants(x) {
                    acc(slot(grads, nodes, *x), g.iter().copied());
                }
                if wants(bias) {
                    let db = slot(grads, nodes, *bias);
                    let cols = db.len();
                    for row in g.chunks(cols.max(1)) {
                        acc(db, row.iter().copied());
                    }
                }
            }
            Op::AddTiled(x, tile) => {
                if wants(x) {
                    acc(slot(grads, nodes, *x), g.iter().copied());
                }
                if wants(tile) {
                    let dt = slot(grads, nodes, *tile);
                    let len = dt.len();
                    for chunk in g.chunks(len) {
                        acc(dt, chunk.iter().copied());
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if wants(a) {
                    let da = slot(grads, nodes, *a);
                    acc(da, g.iter().zip(bv).map(|(&g, &y)| g * y));
                }
                if wants(b) {
                    let db = slot(grads, nodes, *b);
                    acc(db, g.iter().zip(av).map(|(&g, &x)| g * x));
                }
            }
            Op::Scale(a, f) => {
                acc(slot(grads, nodes, *a), g.iter().map(|&g| g * *f));
            }
            Op::Sum(a) => {
                let da = slot(grads, nodes, *a);
                let g0 = g[0];
                acc(da, std::iter::repeat(g0));
            }
            Op::Softmax(a, axis) => {
                if wants(a) {
                    let y = nodes[i].value.data();
                    let (outer, extent, inner) = ops::axis_split(nodes[i].value.shape(), *axis)?;
                    let da = slot(grads, nodes, *a);
                    for o in 0..outer {
                        for n in 0..inner {
                            let base = o * extent * inner + n;
                            let mut dot = T::zero();
                            for e in 0..extent {
                                dot += g[base + e * inner] * y[base + e * inner];
                            }
                            for e in 0..extent {
                                let ix = base + e * inner;
                                da[ix] += y[ix] * (g[ix] - dot);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                rstd,
            } => {
                let width = nodes[gain.0].value.len();
                let gv = nodes[gain.0].value.data();
                if wants(gain) {
                    let dg = slot(grads, nodes, *gain);
                    for (grow, nrow) in g.chunks(width).zip(normalized.chunks(width)) {
                        acc(dg, grow.iter().zip(nrow).map(|(&g, &n)| g * n));
                    }
                }
                if wants(bias) {
                    let db = slot(grads, nodes, *bias);
                    for grow in g.chunks(width) {
                        acc(db, grow.iter().copied());
                    }
                }
                if wants(x) {
                    let dx = slot(grads, nodes, *x);
                    let n = T::from_usize(width).unwrap();
                    for (r, (grow, nrow)) in g.chunks(width).zip(normalized.chunks(width)).enumerate() {
                        let mut mean_dxh = T::zero();
                        let mut mean_dxh_xh = T::zero();
                        for c in 0..width {
                            let dxh = grow[c] * gv[c];
                            mean_dxh += dxh;
                            mean_dxh_xh += dxh * nrow[c];
                        }
                        mean_dxh /= n;
                        mean_dxh_xh /= n;
                        for c in 0..width {
                            let dxh = grow[c] * gv[c];
                            dx[r * width + c] += rstd[r] * (dxh - mean_dxh - nrow[c] * mean_dxh_xh);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let xv = nodes[a.0].value.data();
                let da = slot(grads, nodes, *a);
                acc(da, g.iter().zip(xv).map(|(&g, &x)| g * ops::gelu_grad(x)));
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if wants(logits) {
                    let classes = nodes[logits.0].value.dims2()?.1;
                    let scale = g[0] / T::from_usize(labels.len()).unwrap();
                    let dl = slot(grads, nodes, *logits);
                    for (r, &label) in labels.iter().enumerate() {
                        for c in 0..classes {
                            let ind = if c == label { T::one() } else { T::zero() };
                            dl[r * classes + c] += scale * (probs[r * classes + c] - ind);
                        }
                    }
                }
            }
            Op::Attention {
                q,
                k,
                v,
                geom,
                scale,
                probs,
            } => self.attention_backward(g, *q, *k, *v, *geom, *scale, probs, grads)?,
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = nodes[p.0].value.len();
                    if wants(p) {
                        let dp = slot(grads, nodes, *p);
                        acc(dp, g[offset..offset + len].iter().copied());
                    }
                    offset += len;
                }
            }
            Op::SliceRows(a, start) => {
                if wants(a) {
                    let cols = nodes[a.0].value.dims2()?.1;
                    let da = slot(grads, nodes, *a);
                    acc(&mut da[start * cols..], g.iter().copied());
                }
            }
            Op::GatherRows(a, rows) => {
                if wants(a) {
                    let cols = nodes[a.0].value.dims2()?.1;
                    let da = slot(grads, nodes, *a);
                    for (j, &r) in rows.iter().enumerate() {
                        acc(&mut da[r * cols..(r + 1) * cols], g[j * cols..(j + 1) * cols].iter().copied());
                    }
                }
            }
        }
        Ok(())
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        g: &[T],
        q: Var,
        k: Var,
        v: Var,
        geom: AttentionGeometry,
        scale: T,
        probs: &[T],
        grads: &mut [Option<Vec<T>>],
    ) -> Result<()> {
        let AttentionGeometry { batch, seq, heads } = geom;
        let (rows, width) = self.nodes[q.0].value.dims2()?;
        let dh = width / heads;
        let (qd, kd, vd) = (
            self.nodes[q.0].value.data(),
            self.nodes[k.0].value.data(),
            self.nodes[v.0].value.data(),
        );
        let mut dq = vec![T::zero(); rows * width];
        let mut dk = vec![T::zero(); rows * width];
        let mut dv = vec![T::zero(); rows * width];
        let mut qh = vec![T::zero(); seq * dh];
        let mut kh = vec![T::zero(); seq * dh];
        let mut vh = vec![T::zero(); seq * dh];
        let mut goh = vec![T::zero(); seq * dh];
        let mut tmp = vec![T::zero(); seq * dh];
        let mut dp = vec![T::zero(); seq * seq];
        for b in 0..batch {
            for h in 0..heads {
                let p = &probs[(b * heads + h) * seq * seq..(b * heads + h + 1) * seq * seq];
                gather_head(qd, width, b * seq, seq, h * dh, dh, &mut qh);
                gather_head(kd, width, b * seq, seq, h * dh, dh, &mut kh);
                gather_head(vd, width, b * seq, seq, h * dh, dh, &mut vh);
                gather_head(g, width, b * seq, seq, h * dh, dh, &mut goh);
                // dV = Pᵀ·dO
                ops::gemm(seq, seq, dh, p, Trans::Yes, &goh, Trans::No, T::zero(), &mut tmp);
                scatter_head(&tmp, width, b * seq, seq, h * dh, dh, &mut dv, true);
                // dP = dO·Vᵀ, then through the row softmax and the score scale
                ops::gemm(seq, dh, seq, &goh, Trans::No, &vh, Trans::Yes, T::zero(), &mut dp);
                for r in 0..seq {
                    let prow = &p[r * seq..(r + 1) * seq];
                    let drow = &mut dp[r * seq..(r + 1) * seq];
                    let dot: T = prow.iter().zip(drow.iter()).map(|(&a, &b)| a * b).sum();
                    for (d, &pv) in drow.iter_mut().zip(prow) {
                        *d = pv * (*d - dot) * scale;
                    }
                }
                // dQ = dS·K, dK = dSᵀ·Q
                ops::gemm(seq, seq, dh, &dp, Trans::No, &kh, Trans::No, T::zero(), &mut tmp);
                scatter_head(&tmp, width, b * seq, seq, h * dh, dh, &mut dq, true);
                ops::gemm(seq, seq, dh, &dp, Trans::Yes, &qh, Trans::No, T::zero(), &mut tmp);
                scatter_head(&tmp, width, b * seq, seq, h * dh, dh, &mut dk, true);
            }
        }
        for (var, d) in [(q, dq), (k, dk), (v, dv)] {
            if self.nodes[var.0].requires_grad {
                let len = self.nodes[var.0].value.len();
                let dst = grads[var.0].get_or_insert_with(|| vec![T::zero(); len]);
                for (x, y) in dst.iter_mut().zip(d) {
                    *x += y;
                }
            }
        }
        Ok(())
    }
}

fn slot<'a, T: Scalar>(grads: &'a mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var) -> &'a mut Vec<T> {
    let len = nodes[v.0].value.len();
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn gather_head<T: Scalar>(
    src: &[T],
    width: usize,
    row0: usize,
    rows: usize,
    col0: usize,
    cols: usize,
    dst: &mut [T],
) {
    for r in 0..rows {
        let s = (row0 + r) * width + col0;
        dst[r * cols..(r + 1) * cols].copy_from_slice(&src[s..s + cols]);
    }
}

#[allow(clippy::too_many_arguments)]
fn scatter_head<T: Scalar>(
    src: &[T],
    width: usize,
    row0: usize,
    rows: usize,
    col0: usize,
    cols: usize,
    dst: &mut [T],
    accumulate: bool,
) {
    for r in 0..rows {
        let d = (row0 + r) * width + col0;
        let out = &mut dst[d..d + cols];
        let inp = &src[r * cols..(r + 1) * cols];
        if accumulate {
            for (o, &i) in out.iter_mut().zip(inp) {
                *o += i;
            }
        } else {
            out.copy_from_slice(inp);
        }
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Transpose(_) => "transpose",
        Op::Reshape(_) => "reshape",
        Op::Add(..) => "add",
        Op::AddRowBias(..) => "add_row_bias",
        Op::AddTiled(..) => "add_tiled",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scale",
        Op::Sum(_) => "sum",
        Op::Softmax(..) => "softmax",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Gelu(_) => "gelu",
        Op::CrossEntropy { .. } => "cross_entropy",
        Op::Attention { .. } => "attention",
        Op::ConcatRows(_) => "concat_rows",
        Op::SliceRows(..) => "slice_rows",
        Op::GatherRows(..) => "gather_rows",
    }
}
