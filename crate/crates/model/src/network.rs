//! Forward pass: feature fusion, transformer blocks, prediction head and loss.
//!
//! Batches are packed: only valid tokens become rows, and each sequence is a
//! contiguous segment that attention never crosses. PAD positions therefore
//! take no part in any computation.

use std::sync::Arc;

use cmdrec_core::features::MaskedBatch;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{
    BackboneConfig, Directionality, FfnActivation, FfnKind, NormKind, NormPlacement, PosEncoding, N_TYPES, ROPE_BASE,
};
use crate::error::{ModelError, Result};
use crate::graph::{Activation, AttentionSpec, Gradients, Graph, Segments, Var};
use crate::lora::LoraSpec;
use crate::params::{init_params, ParamStore};
use crate::tensor::Tensor;

const LN_EPS: f64 = 1e-5;
const RMS_EPS: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Model {
    pub config: BackboneConfig,
    pub params: ParamStore,
    #[serde(default)]
    pub lora: Option<LoraSpec>,
}

/// Expert selection of every MoE layer: `routing[layer][token]`; empty for dense layers.
pub type Routing = Vec<Vec<Vec<usize>>>;

#[derive(Debug, Clone, Default)]
pub struct ForwardOptions {
    /// Enables dropout.
    pub train: bool,
    pub dropout_seed: u64,
    /// Replays a previous expert selection instead of routing anew.
    pub fixed_routing: Option<Routing>,
}

impl ForwardOptions {
    pub fn eval() -> Self {
        ForwardOptions::default()
    }

    pub fn train(dropout_seed: u64) -> Self {
        ForwardOptions { train: true, dropout_seed, fixed_routing: None }
    }
}

/// Which rows get logits.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    None,
    All,
    Supervised,
    Loss,
}

/// Token layout of a packed batch.
#[derive(Debug, Clone)]
pub struct Packed {
    /// `rows[b][t]` is the packed row of valid position `t` of sequence `b`.
    pub rows: Vec<Vec<Option<usize>>>,
    pub segs: Segments,
    pub positions: Vec<usize>,
    /// `(sequence, position, label)` of every supervised position, in row order.
    pub supervised: Vec<(usize, usize, u32)>,
}

impl Packed {
    pub fn new(batch: &MaskedBatch) -> Packed {
        let mut rows = Vec::with_capacity(batch.inputs.len());
        let mut segs = Vec::new();
        let mut positions = Vec::new();
        let mut supervised = Vec::new();
        for (b, valid) in batch.valid.iter().enumerate() {
            let start = positions.len();
            let mut r = Vec::with_capacity(valid.len());
            for (t, ok) in valid.iter().enumerate() {
                if *ok {
                    r.push(Some(positions.len()));
                    positions.push(t);
                    if let Some(y) = batch.labels[b][t] {
                        supervised.push((b, t, y));
                    }
                } else {
                    r.push(None);
                }
            }
            if positions.len() > start {
                segs.push((start, positions.len() - start));
            }
            rows.push(r);
        }
        Packed { rows, segs: Arc::new(segs), positions, supervised }
    }

    pub fn n_tokens(&self) -> usize {
        self.positions.len()
    }

    fn supervised_rows(&self) -> Vec<usize> {
        self.supervised.iter().map(|(b, t, _)| self.rows[*b][*t].expect("supervised positions are valid")).collect()
    }
}

pub struct Forward {
    pub graph: Graph,
    pub packed: Packed,
    vars: Vec<Option<Var>>,
    pub fused: Var,
    pub hidden: Var,
    pub attention: Vec<Var>,
    /// Gate node per layer (`None` for dense layers).
    pub gates: Vec<Option<Var>>,
    pub logits: Option<Var>,
    pub loss: Option<Var>,
}

impl Forward {
    pub fn routing(&self) -> Routing {
        self.gates
            .iter()
            .map(|g| g.map_or_else(Vec::new, |g| self.graph.gate_selection(g).expect("gate node").to_vec()))
            .collect()
    }

    /// Attention weights of one layer, one matrix per (sequence, head).
    pub fn attention_probs(&self, layer: usize) -> &[Tensor] {
        self.graph.attention_probs(self.attention[layer]).expect("attention node")
    }

    pub fn loss_value(&self) -> Option<f64> {
        self.loss.map(|l| self.graph.value(l).data[0])
    }

    /// Gradients aligned with the parameter store; `None` for frozen or unused tensors.
    pub fn param_grads(&self, grads: &mut Gradients) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|v| v.and_then(|v| grads.take(v))).collect()
    }

    /// Logits of sequence `b` at position `t`, when that row has logits.
    pub fn logits_at(&self, b: usize, t: usize) -> Option<&[f64]> {
        let logits = self.graph.value(self.logits?);
        let row = self.packed.rows[b][t]?;
        if logits.rows == self.packed.n_tokens() {
            Some(logits.row(row))
        } else {
            let i = self.packed.supervised.iter().position(|(sb, st, _)| (*sb, *st) == (b, t))?;
            Some(logits.row(i))
        }
    }
}

struct Builder<'m> {
    model: &'m Model,
    g: Graph,
    vars: Vec<Option<Var>>,
    rng: Option<ChaCha8Rng>,
    attn_nodes: Vec<Var>,
}

impl Builder<'_> {
    fn p(&mut self, name: &str) -> Var {
        let i = self.model.params.index_of(name).unwrap_or_else(|| panic!("missing parameter {name}"));
        if let Some(v) = self.vars[i] {
            return v;
        }
        let p = self.model.params.param(i);
        let v = self.g.param(p.value.clone(), p.trainable);
        self.vars[i] = Some(v);
        v
    }

    fn has(&self, name: &str) -> bool {
        self.model.params.contains(name)
    }

    /// `x W (+ b)`, plus the low-rank update when an adapter is attached.
    fn linear(&mut self, x: Var, name: &str) -> Var {
        let w = self.p(name);
        let mut y = self.g.matmul(x, w);
        let (a_name, b_name) = (format!("{name}.lora_a"), format!("{name}.lora_b"));
        if let (Some(lora), true) = (&self.model.lora, self.has(&a_name)) {
            let s = lora.scaling();
            let (a, b) = (self.p(&a_name), self.p(&b_name));
            let xa = self.g.matmul(x, a);
            let xab = self.g.matmul(xa, b);
            let upd = self.g.scale(xab, s);
            y = self.g.add(y, upd);
        }
        let bias = format!("{name}_b");
        if self.has(&bias) {
            let b = self.p(&bias);
            y = self.g.add_bias(y, b);
        }
        y
    }

    fn dropout(&mut self, x: Var) -> Var {
        let p = self.model.config.dropout;
        let Some(rng) = self.rng.as_mut() else { return x };
        if p == 0.0 {
            return x;
        }
        let (r, c) = self.g.value(x).shape();
        let keep = 1.0 / (1.0 - p);
        let mask = Tensor::from_vec(r, c, (0..r * c).map(|_| if rng.random_bool(p) { 0.0 } else { keep }).collect());
        self.g.mul_const(x, mask)
    }

    fn norm(&mut self, x: Var, prefix: &str) -> Var {
        let g = self.p(&format!("{prefix}.g"));
        match self.model.config.norm {
            NormKind::LayerNorm => {
                let b = self.p(&format!("{prefix}.b"));
                self.g.layer_norm(x, g, b, LN_EPS)
            }
            NormKind::RmsNorm => self.g.rms_norm(x, g, RMS_EPS),
        }
    }

    fn fuse(&mut self, batch: &MaskedBatch, packed: &Packed) -> Result<Var> {
        let c = &self.model.config;
        let n = packed.n_tokens();
        let mut ids = Vec::with_capacity(n);
        let mut types = Vec::with_capacity(n);
        let mut dt = Vec::with_capacity(n);
        let mut text = Vec::with_capacity(n * c.d_text);
        for (b, rows) in packed.rows.iter().enumerate() {
            let seq = &batch.inputs[b];
            for (t, _) in rows.iter().enumerate().filter(|(_, r)| r.is_some()) {
                let id = seq.ids[t] as usize;
                if id >= c.vocab_size {
                    return Err(ModelError::DimensionMismatch(format!("id {id} outside vocabulary of {}", c.vocab_size)));
                }
                let ty = seq.type_codes[t] as usize;
                if ty >= N_TYPES {
                    return Err(ModelError::DimensionMismatch(format!("type code {ty}")));
                }
                let emb = &seq.text_emb[t];
                if emb.len() != c.d_text {
                    return Err(ModelError::DimensionMismatch(format!(
                        "text embedding width {} != d_text {}",
                        emb.len(),
                        c.d_text
                    )));
                }
                ids.push(id);
                types.push(ty);
                dt.push(seq.dt_norm[t]);
                text.extend_from_slice(emb);
            }
        }
        let table = self.p("embed.item");
        let item = self.g.gather(table, ids);
        let item = self.linear(item, "fuse.item");
        let type_table = self.p("fuse.type");
        let ty = self.g.gather(type_table, types);
        let dt = self.g.input(Tensor::from_vec(n, 1, dt));
        let dt = self.linear(dt, "fuse.dt");
        let text = self.g.input(Tensor::from_vec(n, c.d_text, text));
        let text = self.linear(text, "fuse.text");
        let cat = self.g.concat_cols(vec![item, ty, dt, text]);
        let mut h = self.linear(cat, "fuse.out");
        if c.pos_encoding == PosEncoding::LearnedAbsolute {
            if let Some(&p) = packed.positions.iter().find(|p| **p >= c.max_len) {
                return Err(ModelError::DimensionMismatch(format!("position {p} beyond max_len {}", c.max_len)));
            }
            let table = self.p("embed.pos");
            let pos = self.g.gather(table, packed.positions.clone());
            h = self.g.add(h, pos);
        }
        Ok(h)
    }

    fn attention(&mut self, x: Var, layer: usize, packed: &Packed, rope: Option<&(Arc<Tensor>, Arc<Tensor>)>) -> Var {
        let c = &self.model.config;
        let spec = AttentionSpec {
            n_heads: c.n_heads,
            n_kv_heads: c.n_kv_heads,
            head_dim: c.head_dim(),
            causal: c.directionality == Directionality::Causal,
            window: c.window,
        };
        let pre = format!("layers.{layer}.attn");
        let mut q = self.linear(x, &format!("{pre}.wq"));
        let mut k = self.linear(x, &format!("{pre}.wk"));
        let v = self.linear(x, &format!("{pre}.wv"));
        if let Some((cos, sin)) = rope {
            q = self.g.rope(q, cos.clone(), sin.clone());
            k = self.g.rope(k, cos.clone(), sin.clone());
        }
        let o = self.g.attention(q, k, v, spec, packed.segs.clone());
        self.attn_nodes.push(o);
        self.linear(o, &format!("{pre}.wo"))
    }

    fn expert(&mut self, x: Var, prefix: &str) -> Var {
        let h = self.linear(x, &format!("{prefix}.w1"));
        let h = match self.model.config.activation {
            FfnActivation::Relu => self.g.act(h, Activation::Relu),
            FfnActivation::Gelu => self.g.act(h, Activation::Gelu),
            FfnActivation::Swiglu => {
                let gate = self.g.act(h, Activation::Silu);
                let value = self.linear(x, &format!("{prefix}.w3"));
                self.g.mul(gate, value)
            }
        };
        self.linear(h, &format!("{prefix}.w2"))
    }

    fn ffn(&mut self, x: Var, layer: usize, fixed: Option<&Vec<Vec<usize>>>) -> (Var, Option<Var>) {
        let pre = format!("layers.{layer}.ffn");
        match self.model.config.ffn {
            FfnKind::Dense => (self.expert(x, &pre), None),
            FfnKind::Moe { n_experts, top_k } => {
                let n = self.g.value(x).rows;
                let logits = self.linear(x, &format!("{pre}.gate"));
                let gate = self.g.top_k_gate(logits, top_k, fixed.cloned());
                let selection = self.g.gate_selection(gate).expect("gate node").to_vec();
                let mut out: Option<Var> = None;
                for e in 0..n_experts {
                    let rows: Vec<usize> = (0..n).filter(|t| selection[*t].contains(&e)).collect();
                    if rows.is_empty() {
                        continue;
                    }
                    let xe = self.g.gather(x, rows.clone());
                    let ye = self.expert(xe, &format!("{pre}.e{e}"));
                    let w = self.g.pick(gate, rows.clone(), e);
                    let ye = self.g.row_scale(ye, w);
                    let ye = self.g.scatter(ye, rows, n);
                    out = Some(match out {
                        Some(o) => self.g.add(o, ye),
                        None => ye,
                    });
                }
                let out = out.unwrap_or_else(|| {
                    let d = self.g.value(x).cols;
                    self.g.input(Tensor::zeros(n, d))
                });
                (out, Some(gate))
            }
        }
    }
}

impl Model {
    pub fn new(config: BackboneConfig, seed: u64) -> Result<Model> {
        config.validate()?;
        let params = init_params(&config, seed);
        Ok(Model { config, params, lora: None })
    }

    pub fn forward(&self, batch: &MaskedBatch, opts: &ForwardOptions, head: Head) -> Result<Forward> {
        let c = &self.config;
        let packed = Packed::new(batch);
        if packed.n_tokens() == 0 {
            return Err(ModelError::DimensionMismatch("batch has no valid positions".into()));
        }
        if matches!(head, Head::Loss) && packed.supervised.is_empty() {
            return Err(ModelError::NoSupervisedPositions);
        }
        let mut bld = Builder {
            model: self,
            g: Graph::new(),
            vars: vec![None; self.params.len()],
            rng: opts.train.then(|| ChaCha8Rng::seed_from_u64(opts.dropout_seed)),
            attn_nodes: Vec::with_capacity(c.n_layers),
        };
        let fused = bld.fuse(batch, &packed)?;
        let rope = (c.pos_encoding == PosEncoding::Rope).then(|| rope_tables(c.head_dim(), &packed.positions));
        let mut x = fused;
        let mut gates = Vec::with_capacity(c.n_layers);
        for l in 0..c.n_layers {
            let fixed = opts.fixed_routing.as_ref().and_then(|r| r.get(l)).filter(|r| !r.is_empty());
            let (n1, n2) = (format!("layers.{l}.norm1"), format!("layers.{l}.norm2"));
            match c.norm_placement {
                NormPlacement::Pre => {
                    let h = bld.norm(x, &n1);
                    let a = bld.attention(h, l, &packed, rope.as_ref());
                    let a = bld.dropout(a);
                    x = bld.g.add(x, a);
                    let h = bld.norm(x, &n2);
                    let (f, gate) = bld.ffn(h, l, fixed);
                    let f = bld.dropout(f);
                    x = bld.g.add(x, f);
                    gates.push(gate);
                }
                NormPlacement::Post => {
                    let a = bld.attention(x, l, &packed, rope.as_ref());
                    let a = bld.dropout(a);
                    let s = bld.g.add(x, a);
                    x = bld.norm(s, &n1);
                    let (f, gate) = bld.ffn(x, l, fixed);
                    let f = bld.dropout(f);
                    let s = bld.g.add(x, f);
                    x = bld.norm(s, &n2);
                    gates.push(gate);
                }
            }
        }
        if c.norm_placement == NormPlacement::Pre {
            x = bld.norm(x, "final_norm");
        }
        let hidden = x;
        let (mut logits, mut loss) = (None, None);
        if head != Head::None {
            let h = match head {
                Head::All => hidden,
                _ => bld.g.gather(hidden, packed.supervised_rows()),
            };
            let l = if c.tie_weights {
                let table = bld.p("embed.item");
                bld.g.matmul_t(h, false, table, true)
            } else {
                let w = bld.p("head.w");
                bld.g.matmul(h, w)
            };
            logits = Some(l);
            if head == Head::Loss {
                let labels = packed.supervised.iter().map(|(_, _, y)| *y as usize).collect();
                loss = Some(bld.g.cross_entropy(l, labels));
            }
        }
        Ok(Forward {
            graph: bld.g,
            packed,
            vars: bld.vars,
            fused,
            hidden,
            attention: bld.attn_nodes,
            gates,
            logits,
            loss,
        })
    }

    pub fn loss(&self, batch: &MaskedBatch, opts: &ForwardOptions) -> Result<f64> {
        Ok(self.forward(batch, opts, Head::Loss)?.loss_value().expect("loss head"))
    }

    /// Loss, gradients aligned with the parameter store, and the routing used.
    pub fn loss_and_grads(&self, batch: &MaskedBatch, opts: &ForwardOptions) -> Result<(f64, Vec<Option<Tensor>>, Routing)> {
        let fwd = self.forward(batch, opts, Head::Loss)?;
        let loss = fwd.loss.expect("loss head");
        let mut grads = fwd.graph.backward(loss);
        let value = fwd.graph.value(loss).data[0];
        Ok((value, fwd.param_grads(&mut grads), fwd.routing()))
    }

    /// Logits per sequence (`seq_len x vocab_size`); PAD rows are zero.
    pub fn predict_scores(&self, batch: &MaskedBatch) -> Result<Vec<Tensor>> {
        let fwd = self.forward(batch, &ForwardOptions::eval(), Head::All)?;
        let logits = fwd.graph.value(fwd.logits.expect("logits head"));
        Ok(fwd
            .packed
            .rows
            .iter()
            .map(|rows| {
                let mut out = Tensor::zeros(batch.seq_len, self.config.vocab_size);
                for (t, r) in rows.iter().enumerate() {
                    if let Some(r) = r {
                        out.row_mut(t).copy_from_slice(logits.row(*r));
                    }
                }
                out
            })
            .collect())
    }

    /// Logits at supervised positions only, as `(sequence, position, label, logits)`.
    pub fn supervised_scores(&self, batch: &MaskedBatch) -> Result<Vec<(usize, usize, u32, Vec<f64>)>> {
        let fwd = self.forward(batch, &ForwardOptions::eval(), Head::Supervised)?;
        let logits = fwd.graph.value(fwd.logits.expect("logits head"));
        Ok(fwd.packed.supervised.iter().enumerate().map(|(i, (b, t, y))| (*b, *t, *y, logits.row(i).to_vec())).collect())
    }

    /// Final hidden states per sequence (`seq_len x d_model`); PAD rows are zero.
    pub fn hidden_states(&self, batch: &MaskedBatch) -> Result<Vec<Tensor>> {
        let fwd = self.forward(batch, &ForwardOptions::eval(), Head::None)?;
        Ok(unpack(&fwd, fwd.hidden, batch.seq_len))
    }

    /// Output of feature fusion per sequence (`seq_len x d_model`).
    pub fn fuse_features(&self, batch: &MaskedBatch) -> Result<Vec<Tensor>> {
        let fwd = self.forward(batch, &ForwardOptions::eval(), Head::None)?;
        Ok(unpack(&fwd, fwd.fused, batch.seq_len))
    }
}

/// Cosine and sine tables (`positions x head_dim/2`) for interleaved RoPE pairs.
pub fn rope_tables(head_dim: usize, positions: &[usize]) -> (Arc<Tensor>, Arc<Tensor>) {
    let half = head_dim / 2;
    let mut cos = Tensor::zeros(positions.len(), half);
    let mut sin = Tensor::zeros(positions.len(), half);
    for (t, p) in positions.iter().enumerate() {
        for i in 0..half {
            let angle = *p as f64 * ROPE_BASE.powf(-2.0 * i as f64 / head_dim as f64);
            cos.row_mut(t)[i] = angle.cos();
            sin.row_mut(t)[i] = angle.sin();
        }
    }
    (Arc::new(cos), Arc::new(sin))
}

fn unpack(fwd: &Forward, v: Var, seq_len: usize) -> Vec<Tensor> {
    let t = fwd.graph.value(v);
    fwd.packed
        .rows
        .iter()
        .map(|rows| {
            let mut out = Tensor::zeros(seq_len, t.cols);
            for (i, r) in rows.iter().enumerate() {
                if let Some(r) = r {
                    out.row_mut(i).copy_from_slice(t.row(*r));
                }
            }
            out
        })
        .collect()
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exp: Vec<f64> = row.iter().map(|x| (x - max).exp()).collect();
    let sum: f64 = exp.iter().sum();
    exp.into_iter().map(|e| e / sum).collect()
}
