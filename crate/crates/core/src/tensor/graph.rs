use rand::Rng;

use super::{kernels, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Layout of a batched multi-head attention call. Queries are `[batch*q_len, d]`,
/// keys and values `[batch*k_len, d]`, with `d` split evenly over `heads`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnShape {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub heads: usize,
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    ScaleRows(Var, Vec<T>),
    Gelu(Var),
    Relu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Gather {
        table: Var,
        ids: Vec<usize>,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    Softmax(Var),
    Attention {
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        probs: Vec<T>,
        scale: T,
    },
    CrossEntropy {
        logits: Var,
        probs: Vec<T>,
        labels: Vec<T>,
        weights: Vec<T>,
        total_weight: T,
    },
    Sum(Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Define-by-run reverse-mode tape. Build a fresh graph for every forward pass.
pub struct Graph<T: Scalar = f32> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    fault: bool,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err<T>(op: &'static str, a: &Tensor<T>, b: &Tensor<T>) -> Error
where
    T: Scalar,
{
    Error::Shape {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
            fault: false,
        }
    }

    /// Deliberately perturb the matmul weight-gradient rule. Negative control
    /// for the finite-difference harness only.
    #[doc(hidden)]
    pub fn inject_fault(&mut self, on: bool) {
        self.fault = on;
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// A trainable leaf.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let out = ta.matmul(tb)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::MatMul(a, b), tracked))
    }

    /// `x[r, :] + bias` for every row `r`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.len() != tx.cols() {
            return Err(shape_err("add_bias", tx, tb));
        }
        let mut out = tx.clone();
        let c = tx.cols();
        for row in out.data_mut().chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let tracked = self.tracked(x) || self.tracked(bias);
        Ok(self.push(out, Op::AddBias(x, bias), tracked))
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let h = self.matmul(x, w)?;
        self.add_bias(h, b)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("add", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| *x + *y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::Add(a, b), tracked))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| *x * *y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::Mul(a, b), tracked))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|v| *v * s).collect();
        let out = Tensor::new(tx.shape().to_vec(), data).expect("same length");
        let tracked = self.tracked(x);
        self.push(out, Op::Scale(x, s), tracked)
    }

    /// Multiply row `r` of `x` by the constant `weights[r]`.
    pub fn scale_rows(&mut self, x: Var, weights: Vec<T>) -> Result<Var> {
        let tx = self.value(x);
        if weights.len() != tx.rows() {
            return Err(Error::Shape {
                op: "scale_rows",
                left: tx.shape().to_vec(),
                right: vec![weights.len()],
            });
        }
        let mut out = tx.clone();
        let c = tx.cols();
        for (row, &w) in out.data_mut().chunks_mut(c).zip(&weights) {
            for v in row {
                *v *= w;
            }
        }
        let tracked = self.tracked(x);
        Ok(self.push(out, Op::ScaleRows(x, weights), tracked))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx.data().iter().map(|&v| kernels::gelu(v)).collect();
        let out = Tensor::new(tx.shape().to_vec(), data).expect("same length");
        let tracked = self.tracked(x);
        self.push(out, Op::Gelu(x), tracked)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let tx = self.value(x);
        let data = tx
            .data()
            .iter()
            .map(|&v| if v > T::ZERO { v } else { T::ZERO })
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data).expect("same length");
        let tracked = self.tracked(x);
        self.push(out, Op::Relu(x), tracked)
    }

    /// Per-row layer normalization with learned gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let tx = self.value(x);
        let d = tx.cols();
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.len() != d || tb.len() != d {
            return Err(shape_err("layer_norm", tx, tg));
        }
        let mut out = vec![T::ZERO; tx.len()];
        let mut xhat = vec![T::ZERO; tx.len()];
        let inv_std = kernels::layer_norm(tx.data(), d, tg.data(), tb.data(), &mut out, Some(&mut xhat));
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        let tracked = self.tracked(x) || self.tracked(gain) || self.tracked(bias);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            tracked,
        ))
    }

    /// Rows of `table` selected by `ids`; the backward pass scatters into the table.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (rows, d) = (tt.rows(), tt.cols());
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::contract(format!(
                    "embedding id {id} out of range for table with {rows} rows"
                )));
            }
            out.extend_from_slice(tt.row(id));
        }
        let out = Tensor::new(vec![ids.len(), d], out)?;
        let tracked = self.tracked(table);
        Ok(self.push(
            out,
            Op::Gather {
                table,
                ids: ids.to_vec(),
            },
            tracked,
        ))
    }

    /// Inverted dropout: kept units are scaled by `1/(1-rate)`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, rate: f64, rng: &mut R) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = T::from_f64(1.0 / (1.0 - rate));
        let tx = self.value(x);
        let mask: Vec<T> = (0..tx.len())
            .map(|_| if rng.random::<f64>() < rate { T::ZERO } else { keep })
            .collect();
        let data = tx.data().iter().zip(&mask).map(|(v, m)| *v * *m).collect();
        let out = Tensor::new(tx.shape().to_vec(), data).expect("same length");
        let tracked = self.tracked(x);
        self.push(out, Op::Dropout { x, mask }, tracked)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let out = self.value(x).softmax_last();
        let tracked = self.tracked(x);
        self.push(out, Op::Softmax(x), tracked)
    }

    /// Scaled dot-product multi-head attention.
    ///
    /// `key_mask[b * k_len + j]` marks real (attendable) keys. With `causal`,
    /// query `i` only sees keys `j <= i + (k_len - q_len)`. Disallowed keys get
    /// probability exactly zero.
    pub fn attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        shape: AttnShape,
        key_mask: &[bool],
        causal: bool,
    ) -> Result<Var> {
        let AttnShape {
            batch,
            q_len,
            k_len,
            heads,
        } = shape;
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        let d = tq.cols();
        if tq.rows() != batch * q_len
            || tk.rows() != batch * k_len
            || tv.rows() != batch * k_len
            || tk.cols() != d
            || tv.cols() != d
            || key_mask.len() != batch * k_len
            || heads == 0
            || d % heads != 0
            || (causal && k_len < q_len)
        {
            return Err(shape_err("attention", tq, tk));
        }
        let scale = T::ONE / T::from_f64((d / heads) as f64).sqrt();
        let mut probs = vec![T::ZERO; batch * heads * q_len * k_len];
        let out = kernels::attention_forward(
            tq.data(),
            tk.data(),
            tv.data(),
            d,
            shape,
            key_mask,
            causal,
            Some(&mut probs),
        );
        let out = Tensor::new(vec![batch * q_len, d], out)?;
        let tracked = self.tracked(q) || self.tracked(k) || self.tracked(v);
        Ok(self.push(
            out,
            Op::Attention {
                q,
                k,
                v,
                shape,
                probs,
                scale,
            },
            tracked,
        ))
    }

    /// Mean over unmasked rows of `-Σ_v label(v) · log softmax(logits)(v)`.
    pub fn cross_entropy_soft(&mut self, logits: Var, labels: &Tensor<T>, mask: &[bool]) -> Result<Var> {
        let weights: Vec<T> = mask.iter().map(|&m| if m { T::ONE } else { T::ZERO }).collect();
        self.cross_entropy_weighted(logits, labels, &weights)
    }

    /// Weighted mean of per-row soft-label cross entropies,
    /// `Σ_r w_r·CE_r / Σ_r w_r`. Rows with zero weight are ignored entirely.
    pub fn cross_entropy_weighted(&mut self, logits: Var, labels: &Tensor<T>, weights: &[T]) -> Result<Var> {
        let tl = self.value(logits);
        if tl.shape() != labels.shape() || weights.len() != tl.rows() {
            return Err(shape_err("cross_entropy_soft", tl, labels));
        }
        let v = tl.cols();
        let mut total_weight = T::ZERO;
        let mut total = 0.0f64;
        let mut probs = vec![T::ZERO; tl.len()];
        let mut logp = vec![T::ZERO; v];
        for (r, &w) in weights.iter().enumerate() {
            if w == T::ZERO {
                continue;
            }
            if !(w > T::ZERO && w.is_finite()) {
                return Err(Error::contract(format!("row weight {w:?} is not positive")));
            }
            let lab = labels.row(r);
            let s: f64 = lab.iter().map(|x| x.to_f64()).sum();
            if (s - 1.0).abs() > 1e-6 {
                return Err(Error::contract(format!(
                    "soft label row {r} sums to {s}, expected 1"
                )));
            }
            kernels::log_softmax(tl.row(r), &mut logp);
            let mut row_loss = 0.0;
            for (j, (&l, &lp)) in lab.iter().zip(&logp).enumerate() {
                if l != T::ZERO {
                    row_loss -= l.to_f64() * lp.to_f64();
                }
                probs[r * v + j] = lp.exp();
            }
            total += w.to_f64() * row_loss;
            total_weight += w;
        }
        if total_weight == T::ZERO {
            return Err(Error::contract("cross entropy over zero unmasked positions"));
        }
        let out = Tensor::scalar(T::from_f64(total / total_weight.to_f64()));
        let tracked = self.tracked(logits);
        Ok(self.push(
            out,
            Op::CrossEntropy {
                logits,
                probs,
                labels: labels.data().to_vec(),
                weights: weights.to_vec(),
                total_weight,
            },
            tracked,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let mut s = T::ZERO;
        for &v in self.value(x).data() {
            s += v;
        }
        let tracked = self.tracked(x);
        self.push(Tensor::scalar(s), Op::Sum(x), tracked)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape().len() != 2 || start > end || end > tx.rows() {
            return Err(Error::contract(format!(
                "row slice {start}..{end} invalid for shape {:?}",
                tx.shape()
            )));
        }
        let c = tx.cols();
        let data = tx.data()[start * c..end * c].to_vec();
        let out = Tensor::new(vec![end - start, c], data)?;
        let tracked = self.tracked(x);
        Ok(self.push(out, Op::SliceRows { x, start }, tracked))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::contract("concat of zero tensors"));
        };
        let c = self.value(first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let tp = self.value(p);
            if tp.shape().len() != 2 || tp.cols() != c {
                return Err(shape_err("concat_rows", self.value(first), tp));
            }
            rows += tp.rows();
            data.extend_from_slice(tp.data());
        }
        let out = Tensor::new(vec![rows, c], data)?;
        let tracked = parts.iter().any(|&p| self.tracked(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), tracked))
    }

    /// Reverse pass from a scalar `loss`. Afterwards every tracked node
    /// created up to `loss` holds a complete gradient (zeros when unreachable).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        if !self.tracked(loss) {
            return Err(Error::contract("loss is not connected to any tracked tensor"));
        }
        for g in self.grads.iter_mut() {
            *g = None;
        }
        self.grads[loss.0] = Some(vec![T::ONE]);
        let fault = self.fault;
        let Graph { nodes, grads, .. } = self;
        for idx in (0..=loss.0).rev() {
            let node = &nodes[idx];
            if !node.tracked || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            backprop_node(nodes, grads, node, &g, fault);
            grads[idx] = Some(g);
        }
        for (node, g) in nodes.iter().zip(grads.iter_mut()).take(loss.0 + 1) {
            if node.tracked && g.is_none() {
                *g = Some(vec![T::ZERO; node.value.len()]);
            }
        }
        Ok(())
    }
}

fn acc<'a, T: Scalar>(nodes: &[Node<T>], grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
    if !nodes[v.0].tracked {
        return None;
    }
    let n = nodes[v.0].value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![T::ZERO; n]))
}

fn backprop_node<T: Scalar>(nodes: &[Node<T>], grads: &mut [Option<Vec<T>>], node: &Node<T>, g: &[T], fault: bool) {
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            if let Some(ga) = acc(nodes, grads, *a) {
                kernels::matmul_nt_acc(g, tb.data(), m, n, k, ga);
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                if fault {
                    let mut tmp = vec![T::ZERO; k * n];
                    kernels::matmul_tn_acc(ta.data(), g, m, k, n, &mut tmp);
                    let bump = T::from_f64(1.01);
                    for (o, t) in gb.iter_mut().zip(tmp) {
                        *o += t * bump;
                    }
                } else {
                    kernels::matmul_tn_acc(ta.data(), g, m, k, n, gb);
                }
            }
        }
        Op::AddBias(x, b) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                for (o, &v) in gx.iter_mut().zip(g) {
                    *o += v;
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                let c = gb.len();
                for row in g.chunks(c) {
                    for (o, &v) in gb.iter_mut().zip(row) {
                        *o += v;
                    }
                }
            }
        }
        Op::Add(a, b) => {
            for x in [a, b] {
                if let Some(gx) = acc(nodes, grads, *x) {
                    for (o, &v) in gx.iter_mut().zip(g) {
                        *o += v;
                    }
                }
            }
        }
        Op::Mul(a, b) => {
            let (va, vb) = (nodes[a.0].value.data(), nodes[b.0].value.data());
            if let Some(ga) = acc(nodes, grads, *a) {
                for ((o, &v), &y) in ga.iter_mut().zip(g).zip(vb) {
                    *o += v * y;
                }
            }
            if let Some(gb) = acc(nodes, grads, *b) {
                for ((o, &v), &y) in gb.iter_mut().zip(g).zip(va) {
                    *o += v * y;
                }
            }
        }
        Op::Scale(x, s) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                for (o, &v) in gx.iter_mut().zip(g) {
                    *o += v * *s;
                }
            }
        }
        Op::ScaleRows(x, w) => {
            let c = nodes[x.0].value.cols();
            if let Some(gx) = acc(nodes, grads, *x) {
                for ((orow, grow), &wv) in gx.chunks_mut(c).zip(g.chunks(c)).zip(w) {
                    for (o, &v) in orow.iter_mut().zip(grow) {
                        *o += v * wv;
                    }
                }
            }
        }
        Op::Gelu(x) => {
            let xv = nodes[x.0].value.data();
            if let Some(gx) = acc(nodes, grads, *x) {
                for ((o, &v), &xi) in gx.iter_mut().zip(g).zip(xv) {
                    *o += v * kernels::gelu_grad(xi);
                }
            }
        }
        Op::Relu(x) => {
            let xv = nodes[x.0].value.data();
            if let Some(gx) = acc(nodes, grads, *x) {
                for ((o, &v), &xi) in gx.iter_mut().zip(g).zip(xv) {
                    if xi > T::ZERO {
                        *o += v;
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            inv_std,
        } => {
            let d = nodes[gain.0].value.len();
            let gv = nodes[gain.0].value.data();
            if let Some(gg) = acc(nodes, grads, *gain) {
                for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        gg[j] += grow[j] * hrow[j];
                    }
                }
            }
            if let Some(gb) = acc(nodes, grads, *bias) {
                for grow in g.chunks(d) {
                    for j in 0..d {
                        gb[j] += grow[j];
                    }
                }
            }
            if let Some(gx) = acc(nodes, grads, *x) {
                let inv_d = T::ONE / T::from_f64(d as f64);
                let mut dxhat = vec![T::ZERO; d];
                for (r, ((grow, hrow), xrow)) in g.chunks(d).zip(xhat.chunks(d)).zip(gx.chunks_mut(d)).enumerate() {
                    let mut mean_d = T::ZERO;
                    let mut mean_dh = T::ZERO;
                    for j in 0..d {
                        dxhat[j] = grow[j] * gv[j];
                        mean_d += dxhat[j];
                        mean_dh += dxhat[j] * hrow[j];
                    }
                    mean_d *= inv_d;
                    mean_dh *= inv_d;
                    let is = inv_std[r];
                    for j in 0..d {
                        xrow[j] += is * (dxhat[j] - mean_d - hrow[j] * mean_dh);
                    }
                }
            }
        }
        Op::Gather { table, ids } => {
            if let Some(gt) = acc(nodes, grads, *table) {
                let d = nodes[table.0].value.cols();
                for (grow, &id) in g.chunks(d).zip(ids) {
                    for (o, &v) in gt[id * d..(id + 1) * d].iter_mut().zip(grow) {
                        *o += v;
                    }
                }
            }
        }
        Op::Dropout { x, mask } => {
            if let Some(gx) = acc(nodes, grads, *x) {
                for ((o, &v), &m) in gx.iter_mut().zip(g).zip(mask) {
                    *o += v * m;
                }
            }
        }
        Op::Softmax(x) => {
            let y = &node.value;
            let c = y.cols();
            if let Some(gx) = acc(nodes, grads, *x) {
                for ((orow, grow), yrow) in gx.chunks_mut(c).zip(g.chunks(c)).zip(y.data().chunks(c)) {
                    let dotv: T = kernels::dot(grow, yrow);
                    for j in 0..c {
                        orow[j] += yrow[j] * (grow[j] - dotv);
                    }
                }
            }
        }
        Op::Attention {
            q,
            k,
            v,
            shape,
            probs,
            scale,
        } => attention_backward(nodes, grads, g, *q, *k, *v, *shape, probs, *scale),
        Op::CrossEntropy {
            logits,
            probs,
            labels,
            weights,
            total_weight,
        } => {
            let vcols = nodes[logits.0].value.cols();
            let upstream = g[0] / *total_weight;
            if let Some(gl) = acc(nodes, grads, *logits) {
                for (r, &w) in weights.iter().enumerate() {
                    if w == T::ZERO {
                        continue;
                    }
                    let lab = &labels[r * vcols..(r + 1) * vcols];
                    let mut lsum = T::ZERO;
                    for &l in lab {
                        lsum += l;
                    }
                    let p = &probs[r * vcols..(r + 1) * vcols];
                    let o = &mut gl[r * vcols..(r + 1) * vcols];
                    let scale = upstream * w;
                    for j in 0..vcols {
                        o[j] += scale * (p[j] * lsum - lab[j]);
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = acc(nodes, grads, *x) {
                for o in gx.iter_mut() {
                    *o += g[0];
                }
            }
        }
        Op::SliceRows { x, start } => {
            let c = nodes[x.0].value.cols();
            if let Some(gx) = acc(nodes, grads, *x) {
                for (o, &v) in gx[start * c..start * c + g.len()].iter_mut().zip(g) {
                    *o += v;
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut off = 0;
            for p in parts {
                let n = nodes[p.0].value.len();
                if let Some(gp) = acc(nodes, grads, *p) {
                    for (o, &v) in gp.iter_mut().zip(&g[off..off + n]) {
                        *o += v;
                    }
                }
                off += n;
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn attention_backward<T: Scalar>(
    nodes: &[Node<T>],
    grads: &mut [Option<Vec<T>>],
    g: &[T],
    q: Var,
    k: Var,
    v: Var,
    shape: AttnShape,
    probs: &[T],
    scale: T,
) {
    let AttnShape {
        batch,
        q_len,
        k_len,
        heads,
    } = shape;
    let d = nodes[q.0].value.cols();
    let dh = d / heads;
    let (qd, kd, vd) = (
        nodes[q.0].value.data(),
        nodes[k.0].value.data(),
        nodes[v.0].value.data(),
    );
    let mut gq = vec![T::ZERO; qd.len()];
    let mut gk = vec![T::ZERO; kd.len()];
    let mut gv = vec![T::ZERO; vd.len()];
    let mut dp = vec![T::ZERO; k_len];
    for b in 0..batch {
        for h in 0..heads {
            let col = h * dh;
            for i in 0..q_len {
                let p = &probs[((b * heads + h) * q_len + i) * k_len..][..k_len];
                let go = &g[(b * q_len + i) * d + col..][..dh];
                let mut rowdot = T::ZERO;
                for j in 0..k_len {
                    if p[j] == T::ZERO {
                        dp[j] = T::ZERO;
                        continue;
                    }
                    let kv = (b * k_len + j) * d + col;
                    dp[j] = kernels::dot(go, &vd[kv..kv + dh]);
                    rowdot += p[j] * dp[j];
                    kernels::axpy(p[j], go, &mut gv[kv..kv + dh]);
                }
                let qi = (b * q_len + i) * d + col;
                for j in 0..k_len {
                    if p[j] == T::ZERO {
                        continue;
                    }
                    let ds = p[j] * (dp[j] - rowdot) * scale;
                    let kv = (b * k_len + j) * d + col;
                    kernels::axpy(ds, &kd[kv..kv + dh], &mut gq[qi..qi + dh]);
                    kernels::axpy(ds, &qd[qi..qi + dh], &mut gk[kv..kv + dh]);
                }
            }
        }
    }
    for (var, local) in [(q, gq), (k, gk), (v, gv)] {
        if let Some(dst) = acc(nodes, grads, var) {
            for (o, x) in dst.iter_mut().zip(local) {
                *o += x;
            }
        }
    }
}
