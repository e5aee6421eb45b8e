//! Executable property checks for backbones.
//!
//! Each check builds its own random inputs from a seed and returns a
//! description of the first violation it finds.

use std::sync::Arc;

use cmdrec_core::features::{EncodedSequence, MaskMode, MaskedBatch, Scheme, NO_TYPE, NUM_RESERVED, PAD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::{BackboneConfig, Directionality, FfnKind, PosEncoding};
use crate::graph::{AttentionSpec, Graph};
use crate::network::{rope_tables, softmax, ForwardOptions, Head, Model};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub type Check = std::result::Result<(), String>;

fn ensure(ok: bool, msg: impl FnOnce() -> String) -> Check {
    if ok {
        Ok(())
    } else {
        Err(msg())
    }
}

pub fn random_sequence(rng: &mut ChaCha8Rng, len: usize, c: &BackboneConfig) -> EncodedSequence {
    EncodedSequence {
        ids: (0..len).map(|_| rng.random_range(NUM_RESERVED..c.vocab_size as u32)).collect(),
        type_codes: (0..len).map(|_| rng.random_range(0..NO_TYPE)).collect(),
        dt_norm: (0..len).map(|_| rng.random_range(-2.0..2.0)).collect(),
        text_emb: (0..len).map(|_| (0..c.d_text).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
    }
}

/// Batch of the given sequences with every valid position supervised by its own id.
pub fn plain_batch(seqs: &[EncodedSequence], scheme: Scheme) -> MaskedBatch {
    let seq_len = seqs.iter().map(EncodedSequence::len).max().unwrap_or(0);
    let d_text = seqs.iter().flat_map(|s| s.text_emb.first()).map(Vec::len).next().unwrap_or(0);
    let mut inputs = Vec::with_capacity(seqs.len());
    let mut labels = Vec::with_capacity(seqs.len());
    let mut valid = Vec::with_capacity(seqs.len());
    for s in seqs {
        let mut x = s.clone();
        let mut l: Vec<Option<u32>> = s.ids.iter().map(|id| Some(*id)).collect();
        let mut v = vec![true; s.len()];
        while x.ids.len() < seq_len {
            x.ids.push(PAD);
            x.type_codes.push(NO_TYPE);
            x.dt_norm.push(0.0);
            x.text_emb.push(vec![0.0; d_text]);
            l.push(None);
            v.push(false);
        }
        inputs.push(x);
        labels.push(l);
        valid.push(v);
    }
    MaskedBatch { inputs, labels, valid, scheme, mode: MaskMode::Train, seq_len }
}

fn model_and_batch(c: &BackboneConfig, seed: u64, lens: &[usize]) -> (Model, MaskedBatch, ChaCha8Rng) {
    let model = Model::new(c.clone(), seed).expect("valid config");
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xbeef);
    let seqs: Vec<EncodedSequence> = lens.iter().map(|l| random_sequence(&mut rng, *l, c)).collect();
    (model, plain_batch(&seqs, c.default_scheme()), rng)
}

fn lens(c: &BackboneConfig, rng: &mut ChaCha8Rng) -> (usize, usize) {
    let hi = c.max_len.min(24);
    let l = rng.random_range(4..=hi);
    (l, rng.random_range(2..l))
}

/// A (2, L) batch yields two `L x vocab` logit matrices, all finite.
pub fn shape_and_finite(c: &BackboneConfig, seed: u64) -> Check {
    let (l, l2) = lens(c, &mut ChaCha8Rng::seed_from_u64(seed));
    let (model, batch, _) = model_and_batch(c, seed, &[l, l2]);
    let out = model.predict_scores(&batch).map_err(|e| e.to_string())?;
    ensure(out.len() == 2, || format!("{} outputs for 2 sequences", out.len()))?;
    for t in &out {
        ensure(t.shape() == (l, c.vocab_size), || format!("logits shape {:?}, want ({l}, {})", t.shape(), c.vocab_size))?;
        ensure(t.all_finite(), || "non-finite logits".into())?;
    }
    Ok(())
}

/// Causal backbones: logits at positions <= i ignore everything after i, bit for bit.
pub fn causal_leakage(c: &BackboneConfig, seed: u64) -> Check {
    if c.directionality != Directionality::Causal {
        return Ok(());
    }
    let (l, _) = lens(c, &mut ChaCha8Rng::seed_from_u64(seed));
    let (model, batch, mut rng) = model_and_batch(c, seed, &[l]);
    let i = rng.random_range(0..l - 1);
    let mut altered = batch.clone();
    let fresh = random_sequence(&mut rng, l, c);
    let s = &mut altered.inputs[0];
    for t in i + 1..l {
        s.ids[t] = fresh.ids[t];
        s.type_codes[t] = fresh.type_codes[t];
        s.dt_norm[t] = fresh.dt_norm[t];
        s.text_emb[t] = fresh.text_emb[t].clone();
    }
    let a = model.predict_scores(&batch).map_err(|e| e.to_string())?;
    let b = model.predict_scores(&altered).map_err(|e| e.to_string())?;
    for t in 0..=i {
        let same = a[0].row(t).iter().zip(b[0].row(t)).all(|(x, y)| x.to_bits() == y.to_bits());
        ensure(same, || format!("position {t} changed after altering positions > {i}"))?;
    }
    Ok(())
}

/// Whatever sits at PAD positions never reaches valid logits.
pub fn pad_neutrality(c: &BackboneConfig, seed: u64) -> Check {
    let (l, l2) = lens(c, &mut ChaCha8Rng::seed_from_u64(seed));
    let (model, batch, mut rng) = model_and_batch(c, seed, &[l, l2]);
    let mut garbage = batch.clone();
    let fresh = random_sequence(&mut rng, l, c);
    let s = &mut garbage.inputs[1];
    for t in l2..l {
        s.ids[t] = fresh.ids[t];
        s.type_codes[t] = fresh.type_codes[t];
        s.dt_norm[t] = fresh.dt_norm[t] * 100.0;
        s.text_emb[t] = fresh.text_emb[t].clone();
    }
    let a = model.predict_scores(&batch).map_err(|e| e.to_string())?;
    let b = model.predict_scores(&garbage).map_err(|e| e.to_string())?;
    for (seq, len) in [(0, l), (1, l2)] {
        for t in 0..len {
            let same = a[seq].row(t).iter().zip(b[seq].row(t)).all(|(x, y)| x.to_bits() == y.to_bits());
            ensure(same, || format!("sequence {seq} position {t} changed with PAD contents"))?;
        }
    }
    Ok(())
}

/// Rotated scores depend only on the offset between query and key positions.
pub fn rope_shift(head_dim: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let q = Tensor::randn(1, head_dim, 1.0, &mut rng);
    let k = Tensor::randn(1, head_dim, 1.0, &mut rng);
    let (m, n, s) = (rng.random_range(0..200), rng.random_range(0..200), rng.random_range(1..500));
    let score = |pq: usize, pk: usize| {
        let mut g = Graph::new();
        let (cq, sq) = rope_tables(head_dim, &[pq]);
        let (ck, sk) = rope_tables(head_dim, &[pk]);
        let qv = g.input(q.clone());
        let kv = g.input(k.clone());
        let rq = g.rope(qv, cq, sq);
        let rk = g.rope(kv, ck, sk);
        g.value(rq).data.iter().zip(&g.value(rk).data).map(|(a, b)| a * b).sum::<f64>()
    };
    let (a, b) = (score(m, n), score(m + s, n + s));
    ensure((a - b).abs() <= 1e-9 * (1.0 + a.abs()), || format!("score({m},{n}) = {a} but shifted by {s} gives {b}"))
}

/// Reference multi-head attention written independently of the fused op.
pub fn naive_attention(q: &Tensor, k: &Tensor, v: &Tensor, n_heads: usize, causal: bool, window: Option<usize>) -> Tensor {
    let (l, d) = q.shape();
    let hd = d / n_heads;
    let mut out = Tensor::zeros(l, d);
    for h in 0..n_heads {
        let cols = h * hd..(h + 1) * hd;
        for i in 0..l {
            let visible: Vec<usize> = (0..l)
                .filter(|j| !causal || *j <= i)
                .filter(|j| window.is_none_or(|w| i.abs_diff(*j) < w))
                .collect();
            let scores: Vec<f64> = visible
                .iter()
                .map(|j| {
                    let dot: f64 = cols.clone().map(|c| q.at(i, c) * k.at(*j, c)).sum();
                    dot / (hd as f64).sqrt()
                })
                .collect();
            let p = softmax(&scores);
            for c in cols.clone() {
                out.row_mut(i)[c] = visible.iter().zip(&p).map(|(j, w)| w * v.at(*j, c)).sum();
            }
        }
    }
    out
}

/// GQA with one KV head per query head is plain multi-head attention, and
/// grouped KV heads equal multi-head attention over repeated KV heads.
pub fn gqa_reduction(seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (l, heads, hd) = (rng.random_range(2..12), 4, 4);
    let causal = rng.random_bool(0.5);
    let window = rng.random_bool(0.5).then(|| rng.random_range(1..5));
    let q = Tensor::randn(l, heads * hd, 1.0, &mut rng);
    let k = Tensor::randn(l, heads * hd, 1.0, &mut rng);
    let v = Tensor::randn(l, heads * hd, 1.0, &mut rng);
    let run = |q: &Tensor, k: &Tensor, v: &Tensor, kv_heads: usize| {
        let mut g = Graph::new();
        let spec = AttentionSpec { n_heads: heads, n_kv_heads: kv_heads, head_dim: hd, causal, window };
        let (a, b, c) = (g.input(q.clone()), g.input(k.clone()), g.input(v.clone()));
        let o = g.attention(a, b, c, spec, Arc::new(vec![(0, l)]));
        g.value(o).clone()
    };
    let full = run(&q, &k, &v, heads);
    let reference = naive_attention(&q, &k, &v, heads, causal, window);
    let diff = full.max_abs_diff(&reference);
    ensure(diff < 1e-12, || format!("n_kv = n_heads differs from multi-head attention by {diff}"))?;
    let kv_heads = 2;
    let k2 = Tensor::randn(l, kv_heads * hd, 1.0, &mut rng);
    let v2 = Tensor::randn(l, kv_heads * hd, 1.0, &mut rng);
    let repeat = |t: &Tensor| {
        let mut out = Tensor::zeros(l, heads * hd);
        for r in 0..l {
            for h in 0..heads {
                let g = h / (heads / kv_heads);
                out.row_mut(r)[h * hd..(h + 1) * hd].copy_from_slice(&t.row(r)[g * hd..(g + 1) * hd]);
            }
        }
        out
    };
    let grouped = run(&q, &k2, &v2, kv_heads);
    let expanded = naive_attention(&q, &repeat(&k2), &repeat(&v2), heads, causal, window);
    let diff = grouped.max_abs_diff(&expanded);
    ensure(diff < 1e-12, || format!("grouped attention differs from repeated KV heads by {diff}"))
}

/// The same backbone with a mixture of identical experts in place of each FFN.
fn moe_twin(dense: &Model, n_experts: usize, top_k: usize, seed: u64) -> Model {
    let config = BackboneConfig { ffn: FfnKind::Moe { n_experts, top_k }, ..dense.config.clone() };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamStore::default();
    for p in dense.params.iter() {
        let Some(rest) = p.name.strip_prefix("layers.") else {
            params.insert(p.name.clone(), p.value.clone());
            continue;
        };
        let (layer, field) = rest.split_once('.').expect("layer parameter");
        match field.strip_prefix("ffn.") {
            Some(w) => {
                let gate = format!("layers.{layer}.ffn.gate");
                if !params.contains(&gate) {
                    params.insert(gate, Tensor::randn(config.d_model, n_experts, 1.0, &mut rng));
                }
                for e in 0..n_experts {
                    params.insert(format!("layers.{layer}.ffn.e{e}.{w}"), p.value.clone());
                }
            }
            None => {
                params.insert(p.name.clone(), p.value.clone());
            }
        }
    }
    Model { config, params, lora: None }
}

/// Identical experts make any gate a convex combination of equal outputs,
/// and moe(1, 1) is the dense FFN.
pub fn moe_convexity(c: &BackboneConfig, seed: u64) -> Check {
    let dense_cfg = BackboneConfig { ffn: FfnKind::Dense, ..c.clone() };
    let (l, l2) = lens(c, &mut ChaCha8Rng::seed_from_u64(seed));
    let (dense, batch, _) = model_and_batch(&dense_cfg, seed, &[l, l2]);
    let want = dense.predict_scores(&batch).map_err(|e| e.to_string())?;
    let (n_experts, top_k) = match c.ffn {
        FfnKind::Moe { n_experts, top_k } => (n_experts, top_k),
        FfnKind::Dense => (4, 2),
    };
    for (n, k) in [(n_experts, top_k), (1, 1)] {
        let moe = moe_twin(&dense, n, k, seed);
        let got = moe.predict_scores(&batch).map_err(|e| e.to_string())?;
        for (a, b) in got.iter().zip(&want) {
            let diff = a.max_abs_diff(b);
            ensure(diff <= 1e-6, || format!("moe({n}, {k}) with identical experts differs from dense by {diff}"))?;
        }
        let fwd = moe.forward(&batch, &ForwardOptions::eval(), Head::None).map_err(|e| e.to_string())?;
        for gate in fwd.gates.iter().flatten() {
            let w = fwd.graph.value(*gate);
            for r in 0..w.rows {
                let sum: f64 = w.row(r).iter().sum();
                let used = w.row(r).iter().filter(|x| **x > 0.0).count();
                ensure((sum - 1.0).abs() <= 1e-6 && used <= k, || format!("gate row {r} sums to {sum} over {used} experts"))?;
            }
        }
    }
    Ok(())
}

/// Attention rows are distributions over the allowed keys; so are logits softmaxes.
pub fn softmax_rows(c: &BackboneConfig, seed: u64) -> Check {
    let (l, l2) = lens(c, &mut ChaCha8Rng::seed_from_u64(seed));
    let (model, batch, _) = model_and_batch(c, seed, &[l, l2]);
    let fwd = model.forward(&batch, &ForwardOptions::eval(), Head::All).map_err(|e| e.to_string())?;
    let spec = AttentionSpec {
        n_heads: c.n_heads,
        n_kv_heads: c.n_kv_heads,
        head_dim: c.head_dim(),
        causal: c.directionality == Directionality::Causal,
        window: c.window,
    };
    for layer in 0..c.n_layers {
        for (i, p) in fwd.attention_probs(layer).iter().enumerate() {
            let len = p.rows;
            for r in 0..len {
                let (lo, hi) = spec.key_range(r, len);
                let inside: f64 = p.row(r)[lo..=hi].iter().sum();
                let outside = p.row(r).iter().enumerate().any(|(j, x)| !(lo..=hi).contains(&j) && *x != 0.0);
                ensure((inside - 1.0).abs() <= 1e-6 && !outside, || {
                    format!("layer {layer} matrix {i} row {r}: mass {inside}, leak outside window {outside}")
                })?;
            }
        }
    }
    let logits = fwd.graph.value(fwd.logits.expect("logits"));
    for r in 0..logits.rows {
        let sum: f64 = softmax(logits.row(r)).iter().sum();
        ensure((sum - 1.0).abs() <= 1e-6, || format!("softmax row {r} sums to {sum}"))?;
    }
    Ok(())
}

/// Two evaluations of the same inputs agree bit for bit.
pub fn determinism(c: &BackboneConfig, seed: u64) -> Check {
    let (l, l2) = lens(c, &mut ChaCha8Rng::seed_from_u64(seed));
    let (model, batch, _) = model_and_batch(c, seed, &[l, l2]);
    let a = model.predict_scores(&batch).map_err(|e| e.to_string())?;
    let b = model.predict_scores(&batch).map_err(|e| e.to_string())?;
    ensure(a.iter().zip(&b).all(|(x, y)| x.bits_eq(y)), || "repeated forward passes differ".into())
}

/// Perturbing position j moves hidden states only at positions >= j (causal)
/// or everywhere (bidirectional).
pub fn causality_probe(c: &BackboneConfig, seed: u64) -> Check {
    let (l, _) = lens(c, &mut ChaCha8Rng::seed_from_u64(seed));
    let (model, batch, mut rng) = model_and_batch(c, seed, &[l]);
    let j = rng.random_range(1..l - 1);
    let mut moved = batch.clone();
    moved.inputs[0].dt_norm[j] += 1.0;
    moved.inputs[0].text_emb[j].iter_mut().for_each(|x| *x = -*x);
    let a = model.hidden_states(&batch).map_err(|e| e.to_string())?;
    let b = model.hidden_states(&moved).map_err(|e| e.to_string())?;
    let window = c.window.unwrap_or(usize::MAX);
    for t in 0..l {
        let changed = a[0].row(t).iter().zip(b[0].row(t)).any(|(x, y)| (x - y).abs() > 1e-12);
        let reach = c.n_layers.saturating_mul(window.saturating_sub(1));
        let expect = match c.directionality {
            Directionality::Causal => t >= j && t - j <= reach,
            Directionality::Bidirectional => t.abs_diff(j) <= reach,
        };
        ensure(changed == expect, || format!("position {t}: changed = {changed} after perturbing {j}"))?;
    }
    Ok(())
}

/// Fusion is a pure function of the features (without learned positions),
/// and zero dt weights remove any dependence on dt.
pub fn fusion_contract(c: &BackboneConfig, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::new(c.clone(), seed).expect("valid config");
    let mut s = random_sequence(&mut rng, 6, c);
    s.ids[4] = s.ids[1];
    s.type_codes[4] = s.type_codes[1];
    s.dt_norm[4] = s.dt_norm[1];
    s.text_emb[4] = s.text_emb[1].clone();
    let batch = plain_batch(std::slice::from_ref(&s), c.default_scheme());
    let fused = model.fuse_features(&batch).map_err(|e| e.to_string())?;
    if c.pos_encoding != PosEncoding::LearnedAbsolute {
        ensure(fused[0].row(1) == fused[0].row(4), || "identical features fused differently".into())?;
    }
    model.params.get_mut("fuse.dt").expect("dt projection").data.iter_mut().for_each(|x| *x = 0.0);
    let mut other = batch.clone();
    other.inputs[0].dt_norm.iter_mut().for_each(|x| *x = rng.random_range(-3.0..3.0));
    let a = model.fuse_features(&batch).map_err(|e| e.to_string())?;
    let b = model.fuse_features(&other).map_err(|e| e.to_string())?;
    ensure(a[0].bits_eq(&b[0]), || "zero dt weights still depend on dt".into())
}

/// Every check of the suite for one configuration.
pub fn all_checks(c: &BackboneConfig, seed: u64) -> Vec<(&'static str, Check)> {
    vec![
        ("shape", shape_and_finite(c, seed)),
        ("causal leakage", causal_leakage(c, seed)),
        ("pad neutrality", pad_neutrality(c, seed)),
        ("rope shift", if c.pos_encoding == PosEncoding::Rope { rope_shift(c.head_dim(), seed) } else { Ok(()) }),
        ("gqa reduction", gqa_reduction(seed)),
        ("moe convexity", moe_convexity(c, seed)),
        ("softmax rows", softmax_rows(c, seed)),
        ("determinism", determinism(c, seed)),
        ("causality probe", causality_probe(c, seed)),
        ("fusion", fusion_contract(c, seed)),
    ]
}
