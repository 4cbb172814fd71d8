//! A reverse-mode autodiff tape over row-major matrices.
//!
//! Sequences are packed: a batch of sentences is one tall matrix whose rows
//! belong to consecutive segments, and attention is block-diagonal over those
//! segments. No padding rows exist anywhere in the graph.
//!
//! When the graph is built with gradients disabled, ops keep no backward
//! caches and every node is treated as a constant.

use std::collections::HashMap;
use std::sync::Arc;

use rand::Rng;

use crate::tensor::{matmul, matmul_nt, matmul_tn, Scalar, Tensor};

pub type NodeId = usize;

const LN_EPS: f64 = 1e-5;

/// One block of block-diagonal attention: `q_len` query rows starting at
/// `q_start` attend over `k_len` key rows starting at `k_start`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttnSeg {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
    /// Query `i` sees keys `0..=i + (k_len - q_len)`.
    pub causal: bool,
}

enum Op<T> {
    Constant,
    Param(usize),
    Gather { table: NodeId, ids: Vec<u32>, scale: T },
    AddConst(NodeId),
    Add(NodeId, NodeId),
    AddBias(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    MatMulT(NodeId, NodeId),
    Relu(NodeId),
    LayerNorm { x: NodeId, gain: NodeId, bias: NodeId, xhat: Vec<T>, rstd: Vec<T> },
    Attention { q: NodeId, k: NodeId, v: NodeId, segs: Arc<Vec<AttnSeg>>, heads: usize, probs: Vec<T> },
    Dropout { x: NodeId, mask: Vec<T> },
    SmoothedXent { logits: NodeId, dlogits: Vec<T> },
}

struct Node<T> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients of a scalar output with respect to parameter slots.
pub type SlotGrads<T> = HashMap<usize, Tensor<T>>;

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
    param_nodes: HashMap<usize, NodeId>,
    grad_enabled: bool,
}

impl<T: Scalar> Graph<T> {
    pub fn new(grad_enabled: bool) -> Self {
        Self { nodes: Vec::new(), param_nodes: HashMap::new(), grad_enabled }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id].value
    }

    pub fn shared_value(&self, id: NodeId) -> Arc<Tensor<T>> {
        self.nodes[id].value.clone()
    }

    fn needs(&self, id: NodeId) -> bool {
        self.nodes[id].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.push_shared(Arc::new(value), op, needs_grad)
    }

    fn push_shared(&mut self, value: Arc<Tensor<T>>, op: Op<T>, needs_grad: bool) -> NodeId {
        self.nodes.push(Node { value, op, needs_grad: needs_grad && self.grad_enabled });
        self.nodes.len() - 1
    }

    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Constant, false)
    }

    pub fn constant_shared(&mut self, value: Arc<Tensor<T>>) -> NodeId {
        self.push_shared(value, Op::Constant, false)
    }

    /// Registers a parameter slot. Repeated calls with the same slot return the
    /// same node, so tied parameters accumulate a single gradient.
    pub fn param(&mut self, slot: usize, value: Arc<Tensor<T>>, trainable: bool) -> NodeId {
        if let Some(&id) = self.param_nodes.get(&slot) {
            return id;
        }
        let id = self.push_shared(value, Op::Param(slot), trainable);
        self.param_nodes.insert(slot, id);
        id
    }

    /// Rows of `table` selected by `ids`, multiplied by `scale`.
    pub fn gather(&mut self, table: NodeId, ids: &[u32], scale: T) -> NodeId {
        let t = &self.nodes[table].value;
        let d = t.cols();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend(t.row(i as usize).iter().map(|&v| v * scale));
        }
        let needs = self.needs(table);
        let value = Tensor::matrix(ids.len(), d, out);
        self.push(value, Op::Gather { table, ids: ids.to_vec(), scale }, needs)
    }

    /// `x + c` where `c` is a constant of the same shape.
    pub fn add_const(&mut self, x: NodeId, c: &[T]) -> NodeId {
        let xv = &self.nodes[x].value;
        assert_eq!(xv.len(), c.len());
        let out: Vec<T> = xv.data().iter().zip(c).map(|(&a, &b)| a + b).collect();
        let value = Tensor::matrix(xv.rows(), xv.cols(), out);
        let needs = self.needs(x);
        self.push(value, Op::AddConst(x), needs)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        assert_eq!(av.shape(), bv.shape(), "add shape mismatch");
        let out: Vec<T> = av.data().iter().zip(bv.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::matrix(av.rows(), av.cols(), out);
        let needs = self.needs(a) || self.needs(b);
        self.push(value, Op::Add(a, b), needs)
    }

    /// Adds a row vector to every row of `x`.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> NodeId {
        let (xv, bv) = (&self.nodes[x].value, &self.nodes[bias].value);
        let c = xv.cols();
        assert_eq!(bv.len(), c, "bias width mismatch");
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o = *o + b;
            }
        }
        let value = Tensor::matrix(xv.rows(), c, out);
        let needs = self.needs(x) || self.needs(bias);
        self.push(value, Op::AddBias(x, bias), needs)
    }

    /// `x (m x k) * w (k x n)`.
    pub fn matmul(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let (xv, wv) = (&self.nodes[x].value, &self.nodes[w].value);
        let (m, k, n) = (xv.rows(), xv.cols(), wv.cols());
        assert_eq!(wv.rows(), k, "matmul inner dimension mismatch");
        let mut out = vec![T::zero(); m * n];
        matmul(xv.data(), wv.data(), &mut out, m, k, n, false);
        let needs = self.needs(x) || self.needs(w);
        self.push(Tensor::matrix(m, n, out), Op::MatMul(x, w), needs)
    }

    /// `x (m x k) * w^T` where `w` is `n x k`.
    pub fn matmul_t(&mut self, x: NodeId, w: NodeId) -> NodeId {
        let (xv, wv) = (&self.nodes[x].value, &self.nodes[w].value);
        let (m, k, n) = (xv.rows(), xv.cols(), wv.rows());
        assert_eq!(wv.cols(), k, "matmul_t inner dimension mismatch");
        let mut out = vec![T::zero(); m * n];
        matmul_nt(xv.data(), wv.data(), &mut out, m, k, n, false);
        let needs = self.needs(x) || self.needs(w);
        self.push(Tensor::matrix(m, n, out), Op::MatMulT(x, w), needs)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let xv = &self.nodes[x].value;
        let out: Vec<T> = xv.data().iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let value = Tensor::matrix(xv.rows(), xv.cols(), out);
        let needs = self.needs(x);
        self.push(value, Op::Relu(x), needs)
    }

    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> NodeId {
        let needs = self.needs(x) || self.needs(gain) || self.needs(bias);
        let keep = needs && self.grad_enabled;
        let (xv, gv, bv) = (&self.nodes[x].value, &self.nodes[gain].value, &self.nodes[bias].value);
        let (rows, c) = (xv.rows(), xv.cols());
        let eps = T::from_f64_lossy(LN_EPS);
        let inv_c = T::one() / T::from_usize(c).unwrap();
        let mut out = vec![T::zero(); rows * c];
        let mut xhat = if keep { vec![T::zero(); rows * c] } else { Vec::new() };
        let mut rstds = if keep { vec![T::zero(); rows] } else { Vec::new() };
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rstd = T::one() / (var + eps).sqrt();
            for j in 0..c {
                let h = (row[j] - mean) * rstd;
                out[r * c + j] = h * gv.data()[j] + bv.data()[j];
                if keep {
                    xhat[r * c + j] = h;
                }
            }
            if keep {
                rstds[r] = rstd;
            }
        }
        self.push(
            Tensor::matrix(rows, c, out),
            Op::LayerNorm { x, gain, bias, xhat, rstd: rstds },
            needs,
        )
    }

    /// Multi-head scaled dot-product attention over packed segments.
    pub fn attention(
        &mut self,
        q: NodeId,
        k: NodeId,
        v: NodeId,
        segs: Arc<Vec<AttnSeg>>,
        heads: usize,
    ) -> NodeId {
        let needs = self.needs(q) || self.needs(k) || self.needs(v);
        let keep = needs && self.grad_enabled;
        let (qv, kv, vv) = (&self.nodes[q].value, &self.nodes[k].value, &self.nodes[v].value);
        let d = qv.cols();
        assert_eq!(d % heads, 0);
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut out = vec![T::zero(); qv.rows() * d];
        let mut probs = Vec::new();
        let mut scores = Vec::new();
        for seg in segs.iter() {
            let shift = seg.k_len.saturating_sub(seg.q_len);
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seg.q_len {
                    let qi = &qv.row(seg.q_start + i)[off..off + dh];
                    let visible = if seg.causal { (i + 1 + shift).min(seg.k_len) } else { seg.k_len };
                    scores.clear();
                    let mut max = T::neg_infinity();
                    for j in 0..visible {
                        let kj = &kv.row(seg.k_start + j)[off..off + dh];
                        let s = qi.iter().zip(kj).map(|(&a, &b)| a * b).sum::<T>() * scale;
                        max = max.max(s);
                        scores.push(s);
                    }
                    let mut z = T::zero();
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        z = z + *s;
                    }
                    let orow = &mut out[(seg.q_start + i) * d + off..(seg.q_start + i) * d + off + dh];
                    for (j, s) in scores.iter_mut().enumerate() {
                        *s = *s / z;
                        let vj = &vv.row(seg.k_start + j)[off..off + dh];
                        for (o, &x) in orow.iter_mut().zip(vj) {
                            *o = *o + *s * x;
                        }
                    }
                    if keep {
                        probs.extend_from_slice(&scores);
                        probs.extend(std::iter::repeat_n(T::zero(), seg.k_len - visible));
                    }
                }
            }
        }
        let rows = qv.rows();
        self.push(Tensor::matrix(rows, d, out), Op::Attention { q, k, v, segs, heads, probs }, needs)
    }

    /// Inverted dropout with keep-probability `1 - p`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: NodeId, p: f64, rng: &mut R) -> NodeId {
        if p <= 0.0 {
            return x;
        }
        let xv = &self.nodes[x].value;
        let keep = T::from_f64_lossy(1.0 / (1.0 - p));
        let mask: Vec<T> =
            (0..xv.len()).map(|_| if rng.random::<f64>() < p { T::zero() } else { keep }).collect();
        let out: Vec<T> = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let value = Tensor::matrix(xv.rows(), xv.cols(), out);
        let needs = self.needs(x);
        self.push(value, Op::Dropout { x, mask }, needs)
    }

    /// Mean over rows of `(1 - eps) * nll(target) + eps * mean_v nll(v)`.
    /// Returns a `1 x 1` node.
    pub fn smoothed_xent(&mut self, logits: NodeId, targets: &[u32], eps: f64) -> NodeId {
        let needs = self.needs(logits);
        let lv = &self.nodes[logits].value;
        let (rows, vocab) = (lv.rows(), lv.cols());
        assert_eq!(rows, targets.len(), "one target per logit row");
        let n = rows.max(1) as f64;
        let mut dl = if needs && self.grad_enabled { vec![T::zero(); rows * vocab] } else { Vec::new() };
        let mut total = 0.0f64;
        for r in 0..rows {
            let row = lv.row(r);
            let max = row.iter().copied().fold(T::neg_infinity(), T::max).to_f64().unwrap();
            let z: f64 = row.iter().map(|&x| (x.to_f64().unwrap() - max).exp()).sum();
            let lse = max + z.ln();
            let t = targets[r] as usize;
            let nll = lse - row[t].to_f64().unwrap();
            let mean_nll = lse - row.iter().map(|x| x.to_f64().unwrap()).sum::<f64>() / vocab as f64;
            total += (1.0 - eps) * nll + eps * mean_nll;
            if !dl.is_empty() {
                let d = &mut dl[r * vocab..(r + 1) * vocab];
                for (j, g) in d.iter_mut().enumerate() {
                    let p = (row[j].to_f64().unwrap() - lse).exp();
                    let mut v = p - eps / vocab as f64;
                    if j == t {
                        v -= 1.0 - eps;
                    }
                    *g = T::from_f64_lossy(v / n);
                }
            }
        }
        let value = Tensor::matrix(1, 1, vec![T::from_f64_lossy(total / n)]);
        self.push(value, Op::SmoothedXent { logits, dlogits: dl }, needs)
    }

    /// Back-propagates from the scalar node `out` and returns gradients for
    /// every trainable parameter slot reached.
    pub fn backward(&self, out: NodeId) -> SlotGrads<T> {
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut result = HashMap::new();
        if !self.nodes[out].needs_grad {
            return result;
        }
        grads[out] = Some(vec![T::one(); self.nodes[out].value.len()]);

        for id in (0..=out).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            match &node.op {
                Op::Constant => {}
                Op::Param(slot) => {
                    let v = &node.value;
                    result.insert(*slot, Tensor::matrix_like(v.shape(), g));
                }
                Op::Gather { table, ids, scale } => {
                    if self.needs(*table) {
                        let tv = &self.nodes[*table].value;
                        let d = tv.cols();
                        let acc = self.grad_buf(&mut grads, *table);
                        for (r, &i) in ids.iter().enumerate() {
                            let dst = &mut acc[i as usize * d..(i as usize + 1) * d];
                            for (a, &b) in dst.iter_mut().zip(&g[r * d..(r + 1) * d]) {
                                *a = *a + b * *scale;
                            }
                        }
                    }
                }
                Op::AddConst(x) => self.accumulate(&mut grads, *x, &g),
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, &g);
                    self.accumulate(&mut grads, *b, &g);
                }
                Op::AddBias(x, b) => {
                    self.accumulate(&mut grads, *x, &g);
                    if self.needs(*b) {
                        let c = self.nodes[*b].value.len();
                        let acc = self.grad_buf(&mut grads, *b);
                        for row in g.chunks(c) {
                            for (a, &v) in acc.iter_mut().zip(row) {
                                *a = *a + v;
                            }
                        }
                    }
                }
                Op::MatMul(x, w) => {
                    let (xv, wv) = (&self.nodes[*x].value, &self.nodes[*w].value);
                    let (m, k, n) = (xv.rows(), xv.cols(), wv.cols());
                    if self.needs(*x) {
                        let acc = self.grad_buf(&mut grads, *x);
                        matmul_nt(&g, wv.data(), acc, m, n, k, true);
                    }
                    if self.needs(*w) {
                        let acc = self.grad_buf(&mut grads, *w);
                        matmul_tn(xv.data(), &g, acc, k, m, n, true);
                    }
                }
                Op::MatMulT(x, w) => {
                    let (xv, wv) = (&self.nodes[*x].value, &self.nodes[*w].value);
                    let (m, k, n) = (xv.rows(), xv.cols(), wv.rows());
                    if self.needs(*x) {
                        let acc = self.grad_buf(&mut grads, *x);
                        matmul(&g, wv.data(), acc, m, n, k, true);
                    }
                    if self.needs(*w) {
                        let acc = self.grad_buf(&mut grads, *w);
                        matmul_tn(&g, xv.data(), acc, n, m, k, true);
                    }
                }
                Op::Relu(x) => {
                    if self.needs(*x) {
                        let xv = self.nodes[*x].value.clone();
                        let acc = self.grad_buf(&mut grads, *x);
                        for ((a, &gv), &v) in acc.iter_mut().zip(&g).zip(xv.data()) {
                            if v > T::zero() {
                                *a = *a + gv;
                            }
                        }
                    }
                }
                Op::Dropout { x, mask } => {
                    if self.needs(*x) {
                        let acc = self.grad_buf(&mut grads, *x);
                        for ((a, &gv), &m) in acc.iter_mut().zip(&g).zip(mask) {
                            *a = *a + gv * m;
                        }
                    }
                }
                Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                    self.layer_norm_backward(&mut grads, &g, *x, *gain, *bias, xhat, rstd);
                }
                Op::Attention { q, k, v, segs, heads, probs } => {
                    self.attention_backward(&mut grads, &g, *q, *k, *v, segs, *heads, probs);
                }
                Op::SmoothedXent { logits, dlogits } => {
                    if self.needs(*logits) {
                        let upstream = g[0];
                        let acc = self.grad_buf(&mut grads, *logits);
                        for (a, &d) in acc.iter_mut().zip(dlogits) {
                            *a = *a + d * upstream;
                        }
                    }
                }
            }
        }
        result
    }

    fn grad_buf<'a>(&self, grads: &'a mut [Option<Vec<T>>], id: NodeId) -> &'a mut Vec<T> {
        let n = self.nodes[id].value.len();
        grads[id].get_or_insert_with(|| vec![T::zero(); n])
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], id: NodeId, g: &[T]) {
        if !self.needs(id) {
            return;
        }
        match &mut grads[id] {
            Some(acc) => {
                for (a, &b) in acc.iter_mut().zip(g) {
                    *a = *a + b;
                }
            }
            slot @ None => *slot = Some(g.to_vec()),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn layer_norm_backward(
        &self,
        grads: &mut [Option<Vec<T>>],
        g: &[T],
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: &[T],
        rstd: &[T],
    ) {
        let c = self.nodes[x].value.cols();
        let rows = self.nodes[x].value.rows();
        let gv = self.nodes[gain].value.clone();
        if self.needs(gain) {
            let acc = self.grad_buf(grads, gain);
            for r in 0..rows {
                for j in 0..c {
                    acc[j] = acc[j] + g[r * c + j] * xhat[r * c + j];
                }
            }
        }
        if self.needs(bias) {
            let acc = self.grad_buf(grads, bias);
            for r in 0..rows {
                for j in 0..c {
                    acc[j] = acc[j] + g[r * c + j];
                }
            }
        }
        if self.needs(x) {
            let inv_c = T::one() / T::from_usize(c).unwrap();
            let acc = self.grad_buf(grads, x);
            let mut dxhat = vec![T::zero(); c];
            for r in 0..rows {
                let h = &xhat[r * c..(r + 1) * c];
                let mut mean_d = T::zero();
                let mut mean_dh = T::zero();
                for j in 0..c {
                    dxhat[j] = g[r * c + j] * gv.data()[j];
                    mean_d = mean_d + dxhat[j];
                    mean_dh = mean_dh + dxhat[j] * h[j];
                }
                mean_d = mean_d * inv_c;
                mean_dh = mean_dh * inv_c;
                for j in 0..c {
                    acc[r * c + j] = acc[r * c + j] + rstd[r] * (dxhat[j] - mean_d - h[j] * mean_dh);
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        grads: &mut [Option<Vec<T>>],
        g: &[T],
        q: NodeId,
        k: NodeId,
        v: NodeId,
        segs: &[AttnSeg],
        heads: usize,
        probs: &[T],
    ) {
        let (qv, kv, vv) = (
            self.nodes[q].value.clone(),
            self.nodes[k].value.clone(),
            self.nodes[v].value.clone(),
        );
        let d = qv.cols();
        let dh = d / heads;
        let scale = T::one() / T::from_usize(dh).unwrap().sqrt();
        let mut dq = vec![T::zero(); qv.len()];
        let mut dk = vec![T::zero(); kv.len()];
        let mut dv = vec![T::zero(); vv.len()];
        let mut dp = Vec::new();
        let mut p_off = 0;
        for seg in segs {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..seg.q_len {
                    let qrow = seg.q_start + i;
                    let p = &probs[p_off..p_off + seg.k_len];
                    p_off += seg.k_len;
                    let go = &g[qrow * d + off..qrow * d + off + dh];
                    dp.clear();
                    let mut s = T::zero();
                    for (j, &pj) in p.iter().enumerate() {
                        let vrow = (seg.k_start + j) * d + off;
                        let dpj = go.iter().zip(&vv.data()[vrow..vrow + dh]).map(|(&a, &b)| a * b).sum::<T>();
                        for (x, &gg) in dv[vrow..vrow + dh].iter_mut().zip(go) {
                            *x = *x + pj * gg;
                        }
                        s = s + pj * dpj;
                        dp.push(dpj);
                    }
                    for (j, &pj) in p.iter().enumerate() {
                        let ds = pj * (dp[j] - s) * scale;
                        if ds == T::zero() {
                            continue;
                        }
                        let krow = (seg.k_start + j) * d + off;
                        let qo = qrow * d + off;
                        for c in 0..dh {
                            dq[qo + c] = dq[qo + c] + ds * kv.data()[krow + c];
                            dk[krow + c] = dk[krow + c] + ds * qv.data()[qo + c];
                        }
                    }
                }
            }
        }
        self.accumulate(grads, q, &dq);
        self.accumulate(grads, k, &dk);
        self.accumulate(grads, v, &dv);
    }
}

impl<T: Scalar> Tensor<T> {
    pub(crate) fn matrix_like(shape: &[usize], data: Vec<T>) -> Self {
        Tensor::from_vec(shape, data).expect("gradient matches parameter shape")
    }
}
