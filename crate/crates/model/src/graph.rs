//! Tape-based reverse-mode autodiff over [`Tensor`]s.
//!
//! Every op appends a node holding its forward value; `backward` walks the
//! tape in reverse. Attention, normalization, RoPE, top-k gating and the
//! softmax cross-entropy are fused ops with hand-written adjoints.

use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::tensor::{gemm, matmul, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    Gelu,
    Silu,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Gelu => 0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh()),
            Activation::Silu => x / (1.0 + (-x).exp()),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Gelu => {
                let t = (GELU_C * (x + GELU_A * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
        }
    }
}

/// Head layout and masking rules of one attention call.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionSpec {
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub head_dim: usize,
    pub causal: bool,
    pub window: Option<usize>,
}

impl AttentionSpec {
    /// Keys visible from query `i` inside one sequence of length `len`.
    pub fn key_range(&self, i: usize, len: usize) -> (usize, usize) {
        let w = self.window.unwrap_or(usize::MAX);
        let lo = i.saturating_sub(w.saturating_sub(1));
        let hi = if self.causal { i } else { i.saturating_add(w - 1).min(len - 1) };
        (lo, hi)
    }
}

/// Token rows of each packed sequence: `(start, len)`.
pub type Segments = Arc<Vec<(usize, usize)>>;

enum Op {
    Input,
    Param,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    AddBias(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Tensor),
    Act(Var, Activation),
    Gather { src: Var, rows: Vec<usize> },
    Scatter { src: Var, rows: Vec<usize> },
    Pick { src: Var, rows: Vec<usize>, col: usize },
    RowScale { x: Var, s: Var },
    ConcatCols(Vec<Var>),
    LayerNorm { x: Var, g: Var, b: Var, xhat: Tensor, rstd: Vec<f64> },
    RmsNorm { x: Var, g: Var, xhat: Tensor, rstd: Vec<f64> },
    Rope { x: Var, cos: Arc<Tensor>, sin: Arc<Tensor> },
    Attention { q: Var, k: Var, v: Var, spec: AttentionSpec, segs: Segments, probs: Vec<Tensor> },
    TopKGate { logits: Var, selected: Vec<Vec<usize>> },
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Tensor },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients indexed by node; `None` for nodes that needed none.
pub struct Gradients(Vec<Option<Tensor>>);

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.0[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.0[v.0].take()
    }
}

fn grad_slot(grads: &mut [Option<Tensor>], v: Var, rows: usize, cols: usize) -> &mut Tensor {
    grads[v.0].get_or_insert_with(|| Tensor::zeros(rows, cols))
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, t: Tensor) {
    match &mut grads[v.0] {
        Some(g) => g.add_assign(&t),
        slot => *slot = Some(t),
    }
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Input, false)
    }

    pub fn param(&mut self, t: Tensor, trainable: bool) -> Var {
        self.push(t, Op::Param, trainable)
    }

    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Var {
        let value = matmul(self.value(a), ta, self.value(b), tb);
        let ng = self.ng(&[a, b]);
        self.push(value, Op::MatMul { a, b, ta, tb }, ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, false, b, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        assert_eq!(value.shape(), self.value(b).shape(), "add: shape mismatch");
        value.add_assign(self.value(b));
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Add(a, b), ng)
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Var {
        let mut value = self.value(a).clone();
        let b = self.value(bias);
        assert_eq!((1, value.cols), b.shape(), "add_bias: shape mismatch");
        for r in 0..value.rows {
            value.row_mut(r).iter_mut().zip(&b.data).for_each(|(x, y)| *x += y);
        }
        let ng = self.ng(&[a, bias]);
        self.push(value, Op::AddBias(a, bias), ng)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let mut value = self.value(a).clone();
        assert_eq!(value.shape(), self.value(b).shape(), "mul: shape mismatch");
        value.data.iter_mut().zip(&self.value(b).data).for_each(|(x, y)| *x *= y);
        let ng = self.ng(&[a, b]);
        self.push(value, Op::Mul(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let mut value = self.value(a).clone();
        value.scale(s);
        let ng = self.ng(&[a]);
        self.push(value, Op::Scale(a, s), ng)
    }

    /// Elementwise product with a constant (dropout masks).
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Var {
        let mut value = self.value(a).clone();
        assert_eq!(value.shape(), c.shape(), "mul_const: shape mismatch");
        value.data.iter_mut().zip(&c.data).for_each(|(x, y)| *x *= y);
        let ng = self.ng(&[a]);
        self.push(value, Op::MulConst(a, c), ng)
    }

    pub fn act(&mut self, a: Var, f: Activation) -> Var {
        let mut value = self.value(a).clone();
        value.data.iter_mut().for_each(|x| *x = f.apply(*x));
        let ng = self.ng(&[a]);
        self.push(value, Op::Act(a, f), ng)
    }

    pub fn gather(&mut self, src: Var, rows: Vec<usize>) -> Var {
        let value = self.value(src).gather_rows(&rows);
        let ng = self.ng(&[src]);
        self.push(value, Op::Gather { src, rows }, ng)
    }

    /// `n_rows x cols` zeros with row `rows[i]` set to `src` row `i`. Rows must be distinct.
    pub fn scatter(&mut self, src: Var, rows: Vec<usize>, n_rows: usize) -> Var {
        let s = self.value(src);
        assert_eq!(s.rows, rows.len(), "scatter: row count mismatch");
        let mut value = Tensor::zeros(n_rows, s.cols);
        for (i, r) in rows.iter().enumerate() {
            value.row_mut(*r).copy_from_slice(s.row(i));
        }
        let ng = self.ng(&[src]);
        self.push(value, Op::Scatter { src, rows }, ng)
    }

    /// Column `col` of the selected rows, as an `m x 1` tensor.
    pub fn pick(&mut self, src: Var, rows: Vec<usize>, col: usize) -> Var {
        let s = self.value(src);
        let value = Tensor::from_vec(rows.len(), 1, rows.iter().map(|r| s.at(*r, col)).collect());
        let ng = self.ng(&[src]);
        self.push(value, Op::Pick { src, rows, col }, ng)
    }

    /// Scales row `i` of `x` by `s[i]` (`s` is `m x 1`).
    pub fn row_scale(&mut self, x: Var, s: Var) -> Var {
        let mut value = self.value(x).clone();
        let sv = self.value(s);
        assert_eq!((value.rows, 1), sv.shape(), "row_scale: shape mismatch");
        for r in 0..value.rows {
            let f = sv.data[r];
            value.row_mut(r).iter_mut().for_each(|v| *v *= f);
        }
        let ng = self.ng(&[x, s]);
        self.push(value, Op::RowScale { x, s }, ng)
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let rows = self.value(parts[0]).rows;
        let cols: usize = parts.iter().map(|p| self.value(*p).cols).sum();
        let mut value = Tensor::zeros(rows, cols);
        let mut off = 0;
        for p in &parts {
            let t = self.value(*p);
            assert_eq!(t.rows, rows, "concat_cols: row mismatch");
            for r in 0..rows {
                value.row_mut(r)[off..off + t.cols].copy_from_slice(t.row(r));
            }
            off += t.cols;
        }
        let ng = self.ng(&parts);
        self.push(value, Op::ConcatCols(parts), ng)
    }

    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut xhat = Tensor::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd.push(rs);
            xhat.row_mut(r).iter_mut().zip(row).for_each(|(h, v)| *h = (v - mean) * rs);
        }
        let (gv, bv) = (self.value(g), self.value(b));
        let mut value = xhat.clone();
        for r in 0..rows {
            for ((y, gg), bb) in value.row_mut(r).iter_mut().zip(&gv.data).zip(&bv.data) {
                *y = *y * gg + bb;
            }
        }
        let ng = self.ng(&[x, g, b]);
        self.push(value, Op::LayerNorm { x, g, b, xhat, rstd }, ng)
    }

    pub fn rms_norm(&mut self, x: Var, g: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let (rows, cols) = xv.shape();
        let mut xhat = Tensor::zeros(rows, cols);
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
            let rs = 1.0 / (ms + eps).sqrt();
            rstd.push(rs);
            xhat.row_mut(r).iter_mut().zip(row).for_each(|(h, v)| *h = v * rs);
        }
        let gv = self.value(g);
        let mut value = xhat.clone();
        for r in 0..rows {
            value.row_mut(r).iter_mut().zip(&gv.data).for_each(|(y, gg)| *y *= gg);
        }
        let ng = self.ng(&[x, g]);
        self.push(value, Op::RmsNorm { x, g, xhat, rstd }, ng)
    }

    /// Rotates interleaved pairs of every head; `cos`/`sin` are `tokens x head_dim/2`.
    pub fn rope(&mut self, x: Var, cos: Arc<Tensor>, sin: Arc<Tensor>) -> Var {
        let xv = self.value(x);
        let half = cos.cols;
        assert_eq!(xv.rows, cos.rows, "rope: token count mismatch");
        assert_eq!(xv.cols % (2 * half), 0, "rope: width is not a multiple of head_dim");
        let mut value = xv.clone();
        for t in 0..xv.rows {
            let (c, s) = (cos.row(t), sin.row(t));
            for head in value.row_mut(t).chunks_mut(2 * half) {
                for i in 0..half {
                    let (x0, x1) = (head[2 * i], head[2 * i + 1]);
                    head[2 * i] = x0 * c[i] - x1 * s[i];
                    head[2 * i + 1] = x0 * s[i] + x1 * c[i];
                }
            }
        }
        let ng = self.ng(&[x]);
        self.push(value, Op::Rope { x, cos, sin }, ng)
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, spec: AttentionSpec, segs: Segments) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let hd = spec.head_dim;
        assert_eq!(qv.cols, spec.n_heads * hd, "attention: query width");
        assert_eq!(kv.cols, spec.n_kv_heads * hd, "attention: key width");
        assert_eq!(vv.cols, spec.n_kv_heads * hd, "attention: value width");
        assert_eq!(spec.n_heads % spec.n_kv_heads, 0, "attention: heads per kv group");
        let group = spec.n_heads / spec.n_kv_heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut out = Tensor::zeros(qv.rows, qv.cols);
        let mut probs = Vec::with_capacity(segs.len() * spec.n_heads);
        for &(start, len) in segs.iter() {
            for h in 0..spec.n_heads {
                let g = h / group;
                let mut p = Tensor::zeros(len, len);
                for i in 0..len {
                    let qi = &qv.row(start + i)[h * hd..(h + 1) * hd];
                    let (lo, hi) = spec.key_range(i, len);
                    let prow = p.row_mut(i);
                    let mut max = f64::NEG_INFINITY;
                    for j in lo..=hi {
                        let kj = &kv.row(start + j)[g * hd..(g + 1) * hd];
                        let s = qi.iter().zip(kj).map(|(a, b)| a * b).sum::<f64>() * scale;
                        prow[j] = s;
                        max = max.max(s);
                    }
                    let mut sum = 0.0;
                    for pj in &mut prow[lo..=hi] {
                        *pj = (*pj - max).exp();
                        sum += *pj;
                    }
                    for pj in &mut prow[lo..=hi] {
                        *pj /= sum;
                    }
                    let orow = &mut out.row_mut(start + i)[h * hd..(h + 1) * hd];
                    for j in lo..=hi {
                        let w = prow[j];
                        let vj = &vv.row(start + j)[g * hd..(g + 1) * hd];
                        orow.iter_mut().zip(vj).for_each(|(o, x)| *o += w * x);
                    }
                }
                probs.push(p);
            }
        }
        let ng = self.ng(&[q, k, v]);
        self.push(out, Op::Attention { q, k, v, spec, segs, probs }, ng)
    }

    /// Attention weights of an attention node, one `len x len` matrix per (segment, head).
    pub fn attention_probs(&self, v: Var) -> Option<&[Tensor]> {
        match &self.nodes[v.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Softmax over the `k` largest logits of each row (others get weight 0).
    /// `fixed` replays a previous selection instead of choosing anew.
    pub fn top_k_gate(&mut self, logits: Var, k: usize, fixed: Option<Vec<Vec<usize>>>) -> Var {
        let lv = self.value(logits);
        let selected = fixed.unwrap_or_else(|| {
            (0..lv.rows)
                .map(|r| {
                    let row = lv.row(r);
                    let mut idx: Vec<usize> = (0..row.len()).collect();
                    idx.sort_by(|a, b| row[*b].total_cmp(&row[*a]).then(a.cmp(b)));
                    idx.truncate(k);
                    idx
                })
                .collect()
        });
        let mut value = Tensor::zeros(lv.rows, lv.cols);
        for (r, sel) in selected.iter().enumerate() {
            let row = lv.row(r);
            let max = sel.iter().map(|e| row[*e]).fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = sel.iter().map(|e| (row[*e] - max).exp()).sum();
            for e in sel {
                value.row_mut(r)[*e] = (row[*e] - max).exp() / sum;
            }
        }
        let ng = self.ng(&[logits]);
        self.push(value, Op::TopKGate { logits, selected }, ng)
    }

    pub fn gate_selection(&self, v: Var) -> Option<&[Vec<usize>]> {
        match &self.nodes[v.0].op {
            Op::TopKGate { selected, .. } => Some(selected),
            _ => None,
        }
    }

    /// Mean negative log-likelihood of `labels[i]` under the softmax of logits row `i`.
    pub fn cross_entropy(&mut self, logits: Var, labels: Vec<usize>) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.rows, labels.len(), "cross_entropy: label count");
        let mut probs = lv.clone();
        let mut loss = 0.0;
        for (r, y) in labels.iter().enumerate() {
            let row = probs.row_mut(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            row.iter_mut().for_each(|v| *v /= sum);
            loss -= lv.at(r, *y) - max - sum.ln();
        }
        let n = labels.len().max(1) as f64;
        let ng = self.ng(&[logits]);
        self.push(Tensor::filled(1, 1, loss / n), Op::CrossEntropy { logits, labels, probs }, ng)
    }

    /// Reverse sweep from a scalar node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward needs a scalar");
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::filled(1, 1, 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[i].take() else { continue };
            self.backprop(node, &dy, &mut grads);
            grads[i] = Some(dy);
        }
        Gradients(grads)
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn backprop(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Input | Op::Param => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    let g = grad_slot(grads, *a, av.rows, av.cols);
                    if *ta {
                        gemm(1.0, bv, *tb, dy, true, 1.0, g);
                    } else {
                        gemm(1.0, dy, false, bv, !*tb, 1.0, g);
                    }
                }
                if self.wants(*b) {
                    let g = grad_slot(grads, *b, bv.rows, bv.cols);
                    if *tb {
                        gemm(1.0, dy, true, av, *ta, 1.0, g);
                    } else {
                        gemm(1.0, av, !*ta, dy, false, 1.0, g);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if self.wants(*v) {
                        accumulate(grads, *v, dy.clone());
                    }
                }
            }
            Op::AddBias(a, bias) => {
                if self.wants(*a) {
                    accumulate(grads, *a, dy.clone());
                }
                if self.wants(*bias) {
                    let mut g = Tensor::zeros(1, dy.cols);
                    for r in 0..dy.rows {
                        g.data.iter_mut().zip(dy.row(r)).for_each(|(x, d)| *x += d);
                    }
                    accumulate(grads, *bias, g);
                }
            }
            Op::Mul(a, b) => {
                for (v, other) in [(a, b), (b, a)] {
                    if self.wants(*v) {
                        let mut g = dy.clone();
                        g.data.iter_mut().zip(&self.value(*other).data).for_each(|(x, o)| *x *= o);
                        accumulate(grads, *v, g);
                    }
                }
            }
            Op::Scale(a, s) => {
                let mut g = dy.clone();
                g.scale(*s);
                accumulate(grads, *a, g);
            }
            Op::MulConst(a, c) => {
                let mut g = dy.clone();
                g.data.iter_mut().zip(&c.data).for_each(|(x, m)| *x *= m);
                accumulate(grads, *a, g);
            }
            Op::Act(a, f) => {
                let mut g = dy.clone();
                g.data.iter_mut().zip(&self.value(*a).data).for_each(|(x, v)| *x *= f.derivative(*v));
                accumulate(grads, *a, g);
            }
            Op::Gather { src, rows } => {
                let sv = self.value(*src);
                let g = grad_slot(grads, *src, sv.rows, sv.cols);
                for (i, r) in rows.iter().enumerate() {
                    g.row_mut(*r).iter_mut().zip(dy.row(i)).for_each(|(x, d)| *x += d);
                }
            }
            Op::Scatter { src, rows } => accumulate(grads, *src, dy.gather_rows(rows)),
            Op::Pick { src, rows, col } => {
                let sv = self.value(*src);
                let g = grad_slot(grads, *src, sv.rows, sv.cols);
                for (i, r) in rows.iter().enumerate() {
                    g.row_mut(*r)[*col] += dy.data[i];
                }
            }
            Op::RowScale { x, s } => {
                let (xv, sv) = (self.value(*x), self.value(*s));
                if self.wants(*x) {
                    let mut g = dy.clone();
                    for r in 0..g.rows {
                        let f = sv.data[r];
                        g.row_mut(r).iter_mut().for_each(|v| *v *= f);
                    }
                    accumulate(grads, *x, g);
                }
                if self.wants(*s) {
                    let g = (0..xv.rows).map(|r| xv.row(r).iter().zip(dy.row(r)).map(|(a, b)| a * b).sum()).collect();
                    accumulate(grads, *s, Tensor::from_vec(xv.rows, 1, g));
                }
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let cols = self.value(*p).cols;
                    if self.wants(*p) {
                        let mut g = Tensor::zeros(dy.rows, cols);
                        for r in 0..dy.rows {
                            g.row_mut(r).copy_from_slice(&dy.row(r)[off..off + cols]);
                        }
                        accumulate(grads, *p, g);
                    }
                    off += cols;
                }
            }
            Op::LayerNorm { x, g, b, xhat, rstd } => {
                let gv = self.value(*g);
                let cols = xhat.cols;
                if self.wants(*x) {
                    let mut dx = Tensor::zeros(xhat.rows, cols);
                    for r in 0..xhat.rows {
                        let (dyr, hr) = (dy.row(r), xhat.row(r));
                        let dh: Vec<f64> = dyr.iter().zip(&gv.data).map(|(d, gg)| d * gg).collect();
                        let m1 = dh.iter().sum::<f64>() / cols as f64;
                        let m2 = dh.iter().zip(hr).map(|(d, h)| d * h).sum::<f64>() / cols as f64;
                        for ((o, d), h) in dx.row_mut(r).iter_mut().zip(&dh).zip(hr) {
                            *o = rstd[r] * (d - m1 - h * m2);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if self.wants(*g) {
                    let mut dg = Tensor::zeros(1, cols);
                    for r in 0..xhat.rows {
                        for ((o, d), h) in dg.data.iter_mut().zip(dy.row(r)).zip(xhat.row(r)) {
                            *o += d * h;
                        }
                    }
                    accumulate(grads, *g, dg);
                }
                if self.wants(*b) {
                    let mut db = Tensor::zeros(1, cols);
                    for r in 0..dy.rows {
                        db.data.iter_mut().zip(dy.row(r)).for_each(|(o, d)| *o += d);
                    }
                    accumulate(grads, *b, db);
                }
            }
            Op::RmsNorm { x, g, xhat, rstd } => {
                let gv = self.value(*g);
                let cols = xhat.cols;
                if self.wants(*x) {
                    let mut dx = Tensor::zeros(xhat.rows, cols);
                    for r in 0..xhat.rows {
                        let (dyr, hr) = (dy.row(r), xhat.row(r));
                        let dh: Vec<f64> = dyr.iter().zip(&gv.data).map(|(d, gg)| d * gg).collect();
                        let m2 = dh.iter().zip(hr).map(|(d, h)| d * h).sum::<f64>() / cols as f64;
                        for ((o, d), h) in dx.row_mut(r).iter_mut().zip(&dh).zip(hr) {
                            *o = rstd[r] * (d - h * m2);
                        }
                    }
                    accumulate(grads, *x, dx);
                }
                if self.wants(*g) {
                    let mut dg = Tensor::zeros(1, cols);
                    for r in 0..xhat.rows {
                        for ((o, d), h) in dg.data.iter_mut().zip(dy.row(r)).zip(xhat.row(r)) {
                            *o += d * h;
                        }
                    }
                    accumulate(grads, *g, dg);
                }
            }
            Op::Rope { x, cos, sin } => {
                let half = cos.cols;
                let mut dx = dy.clone();
                for t in 0..dx.rows {
                    let (c, s) = (cos.row(t), sin.row(t));
                    for head in dx.row_mut(t).chunks_mut(2 * half) {
                        for i in 0..half {
                            let (d0, d1) = (head[2 * i], head[2 * i + 1]);
                            head[2 * i] = d0 * c[i] + d1 * s[i];
                            head[2 * i + 1] = -d0 * s[i] + d1 * c[i];
                        }
                    }
                }
                accumulate(grads, *x, dx);
            }
            Op::Attention { q, k, v, spec, segs, probs } => self.attention_backward(*q, *k, *v, spec, segs, probs, dy, grads),
            Op::TopKGate { logits, selected } => {
                let lv = self.value(*logits);
                let w = &node.value;
                let mut dl = Tensor::zeros(lv.rows, lv.cols);
                for (r, sel) in selected.iter().enumerate() {
                    let dot: f64 = sel.iter().map(|e| w.at(r, *e) * dy.at(r, *e)).sum();
                    for e in sel {
                        dl.row_mut(r)[*e] = w.at(r, *e) * (dy.at(r, *e) - dot);
                    }
                }
                accumulate(grads, *logits, dl);
            }
            Op::CrossEntropy { logits, labels, probs } => {
                let scale = dy.data[0] / labels.len().max(1) as f64;
                let mut g = probs.clone();
                for (r, y) in labels.iter().enumerate() {
                    g.row_mut(r)[*y] -= 1.0;
                }
                g.scale(scale);
                accumulate(grads, *logits, g);
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn attention_backward(
        &self,
        q: Var,
        k: Var,
        v: Var,
        spec: &AttentionSpec,
        segs: &Segments,
        probs: &[Tensor],
        dy: &Tensor,
        grads: &mut [Option<Tensor>],
    ) {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let hd = spec.head_dim;
        let group = spec.n_heads / spec.n_kv_heads;
        let scale = 1.0 / (hd as f64).sqrt();
        let mut dq = Tensor::zeros(qv.rows, qv.cols);
        let mut dk = Tensor::zeros(kv.rows, kv.cols);
        let mut dv = Tensor::zeros(vv.rows, vv.cols);
        let mut dp = Vec::new();
        for (s, &(start, len)) in segs.iter().enumerate() {
            for h in 0..spec.n_heads {
                let g = h / group;
                let p = &probs[s * spec.n_heads + h];
                for i in 0..len {
                    let (lo, hi) = spec.key_range(i, len);
                    let doi = &dy.row(start + i)[h * hd..(h + 1) * hd];
                    let prow = p.row(i);
                    dp.clear();
                    let mut dot = 0.0;
                    for j in lo..=hi {
                        let vj = &vv.row(start + j)[g * hd..(g + 1) * hd];
                        let d = doi.iter().zip(vj).map(|(a, b)| a * b).sum::<f64>();
                        dp.push(d);
                        dot += prow[j] * d;
                        let dvj = &mut dv.row_mut(start + j)[g * hd..(g + 1) * hd];
                        dvj.iter_mut().zip(doi).for_each(|(o, x)| *o += prow[j] * x);
                    }
                    let qi: Vec<f64> = qv.row(start + i)[h * hd..(h + 1) * hd].to_vec();
                    for (jj, j) in (lo..=hi).enumerate() {
                        let ds = prow[j] * (dp[jj] - dot) * scale;
                        if ds == 0.0 {
                            continue;
                        }
                        let kj = &kv.row(start + j)[g * hd..(g + 1) * hd];
                        let dqi = &mut dq.row_mut(start + i)[h * hd..(h + 1) * hd];
                        dqi.iter_mut().zip(kj).for_each(|(o, x)| *o += ds * x);
                        let dkj = &mut dk.row_mut(start + j)[g * hd..(g + 1) * hd];
                        dkj.iter_mut().zip(&qi).for_each(|(o, x)| *o += ds * x);
                    }
                }
            }
        }
        for (var, g) in [(q, dq), (k, dk), (v, dv)] {
            if self.wants(var) {
                accumulate(grads, var, g);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Central differences of `f` around every coordinate of `x`.
    fn numeric_grad(x: &Tensor, f: &dyn Fn(&Tensor) -> f64) -> Tensor {
        let eps = 1e-6;
        let mut g = Tensor::zeros(x.rows, x.cols);
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data[i] += eps;
            let mut m = x.clone();
            m.data[i] -= eps;
            g.data[i] = (f(&p) - f(&m)) / (2.0 * eps);
        }
        g
    }

    fn rel_err(a: &Tensor, b: &Tensor) -> f64 {
        a.data
            .iter()
            .zip(&b.data)
            .map(|(x, y)| (x - y).abs() / (x.abs() + y.abs() + 1e-8))
            .fold(0.0, f64::max)
    }

    /// Checks d(sum(w * f(inputs)))/d(input j) for every input.
    fn check(inputs: &[Tensor], build: &dyn Fn(&mut Graph, &[Var]) -> Var) {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let probe = {
            let mut g = Graph::new();
            let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone(), true)).collect();
            let out = build(&mut g, &vars);
            let (r, c) = g.value(out).shape();
            Tensor::randn(r, c, 1.0, &mut rng)
        };
        let eval = |ins: &[Tensor]| -> (f64, Option<Vec<Tensor>>) {
            let mut g = Graph::new();
            let vars: Vec<Var> = ins.iter().map(|t| g.param(t.clone(), true)).collect();
            let out = build(&mut g, &vars);
            let w = g.input(probe.clone());
            let prod = g.mul(out, w);
            let ones = g.input(Tensor::filled(1, probe.rows, 1.0));
            let s1 = g.matmul(ones, prod);
            let ones2 = g.input(Tensor::filled(probe.cols, 1, 1.0));
            let loss = g.matmul(s1, ones2);
            let grads = g.backward(loss);
            let value = g.value(loss).data[0];
            (value, Some(vars.iter().map(|v| grads.get(*v).cloned().unwrap_or(Tensor::zeros(0, 0))).collect()))
        };
        let (_, analytic) = eval(inputs);
        let analytic = analytic.unwrap();
        for j in 0..inputs.len() {
            let f = |t: &Tensor| {
                let mut ins = inputs.to_vec();
                ins[j] = t.clone();
                eval(&ins).0
            };
            let numeric = numeric_grad(&inputs[j], &f);
            let err = rel_err(&analytic[j], &numeric);
            assert!(err < 1e-5, "input {j}: rel err {err}\n{:?}\n{:?}", analytic[j].data, numeric.data);
        }
    }

    fn rnd(r: usize, c: usize, seed: u64) -> Tensor {
        Tensor::randn(r, c, 1.0, &mut ChaCha8Rng::seed_from_u64(seed))
    }

    #[test]
    fn matmul_grads_under_transposes() {
        for (ta, tb) in [(false, false), (true, false), (false, true), (true, true)] {
            let a = if ta { rnd(4, 3, 1) } else { rnd(3, 4, 1) };
            let b = if tb { rnd(5, 4, 2) } else { rnd(4, 5, 2) };
            check(&[a, b], &|g, v| g.matmul_t(v[0], ta, v[1], tb));
        }
    }

    #[test]
    fn elementwise_grads() {
        check(&[rnd(3, 4, 1), rnd(3, 4, 2)], &|g, v| g.mul(v[0], v[1]));
        check(&[rnd(3, 4, 1), rnd(1, 4, 2)], &|g, v| g.add_bias(v[0], v[1]));
        for f in [Activation::Gelu, Activation::Silu, Activation::Relu] {
            check(&[rnd(3, 4, 3)], &|g, v| g.act(v[0], f));
        }
        check(&[rnd(3, 2, 1), rnd(3, 3, 2)], &|g, v| g.concat_cols(vec![v[0], v[1]]));
        check(&[rnd(5, 3, 1), rnd(3, 1, 2)], &|g, v| {
            let x = g.gather(v[0], vec![4, 0, 2]);
            let y = g.row_scale(x, v[1]);
            g.scatter(y, vec![1, 3, 0], 4)
        });
        check(&[rnd(4, 3, 1)], &|g, v| g.pick(v[0], vec![3, 1], 2));
    }

    #[test]
    fn norm_grads() {
        check(&[rnd(3, 6, 1), rnd(1, 6, 2), rnd(1, 6, 3)], &|g, v| g.layer_norm(v[0], v[1], v[2], 1e-5));
        check(&[rnd(3, 6, 1), rnd(1, 6, 2)], &|g, v| g.rms_norm(v[0], v[1], 1e-6));
    }

    #[test]
    fn rope_grad_and_norm_preservation() {
        let cos = Arc::new(Tensor::from_vec(2, 2, vec![0.3f64.cos(), 0.7f64.cos(), 1.1f64.cos(), 0.2f64.cos()]));
        let sin = Arc::new(Tensor::from_vec(2, 2, vec![0.3f64.sin(), 0.7f64.sin(), 1.1f64.sin(), 0.2f64.sin()]));
        check(&[rnd(2, 8, 1)], &|g, v| g.rope(v[0], cos.clone(), sin.clone()));
        let mut g = Graph::new();
        let x = g.input(rnd(2, 8, 1));
        let y = g.rope(x, cos.clone(), sin.clone());
        assert!((g.value(x).sum_sq() - g.value(y).sum_sq()).abs() < 1e-12);
    }

    #[test]
    fn attention_grads_all_modes() {
        let segs: Segments = Arc::new(vec![(0, 3), (3, 4)]);
        for (causal, window, kv) in [(true, None, 2), (false, None, 1), (true, Some(2), 1), (false, Some(2), 2)] {
            let spec = AttentionSpec { n_heads: 2, n_kv_heads: kv, head_dim: 3, causal, window };
            let segs = segs.clone();
            check(&[rnd(7, 6, 1), rnd(7, 3 * kv, 2), rnd(7, 3 * kv, 3)], &move |g, v| {
                g.attention(v[0], v[1], v[2], spec, segs.clone())
            });
        }
    }

    #[test]
    fn gate_and_cross_entropy_grads() {
        check(&[rnd(4, 5, 1)], &|g, v| g.top_k_gate(v[0], 2, None));
        check(&[rnd(3, 4, 1)], &|g, v| g.cross_entropy(v[0], vec![0, 3, 1]));
    }

    #[test]
    fn cross_entropy_fixtures() {
        let mut g = Graph::new();
        let l = g.input(Tensor::zeros(2, 7));
        let loss = g.cross_entropy(l, vec![1, 4]);
        assert!((g.value(loss).data[0] - 7f64.ln()).abs() < 1e-12);
        // Two classes, two positions, by hand.
        let mut g = Graph::new();
        let l = g.input(Tensor::from_rows(&[vec![1.0, 0.0], vec![0.5, 2.0]]));
        let loss = g.cross_entropy(l, vec![0, 0]);
        let want = ((1.0 + (-1.0f64).exp()).ln() + (1.0 + 1.5f64.exp()).ln()) / 2.0;
        assert!((g.value(loss).data[0] - want).abs() < 1e-9);
    }

    #[test]
    fn attention_rows_are_distributions() {
        let mut g = Graph::new();
        let spec = AttentionSpec { n_heads: 2, n_kv_heads: 1, head_dim: 3, causal: true, window: Some(3) };
        let q = g.input(rnd(6, 6, 1));
        let k = g.input(rnd(6, 3, 2));
        let v = g.input(rnd(6, 3, 3));
        let o = g.attention(q, k, v, spec, Arc::new(vec![(0, 6)]));
        for p in g.attention_probs(o).unwrap() {
            for i in 0..p.rows {
                assert!((p.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
                let (lo, hi) = spec.key_range(i, 6);
                assert!(p.row(i).iter().enumerate().all(|(j, x)| (lo..=hi).contains(&j) || *x == 0.0));
            }
        }
    }
}
