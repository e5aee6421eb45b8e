//! Named parameter tensors and their initialization.

use std::collections::HashMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::config::{BackboneConfig, FfnActivation, FfnKind, NormKind, NormPlacement, PosEncoding, N_TYPES};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub value: Tensor,
    pub trainable: bool,
}

/// Insertion-ordered parameter set with name lookup.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<Param>", into = "Vec<Param>")]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl From<Vec<Param>> for ParamStore {
    fn from(params: Vec<Param>) -> Self {
        let index = params.iter().enumerate().map(|(i, p)| (p.name.clone(), i)).collect();
        ParamStore { params, index }
    }
}

impl From<ParamStore> for Vec<Param> {
    fn from(s: ParamStore) -> Self {
        s.params
    }
}

impl ParamStore {
    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) -> usize {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value, trainable: true });
        self.params.len() - 1
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index_of(name).map(|i| &self.params[i].value)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.index_of(name).map(move |i| &mut self.params[i].value)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.index.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn param(&self, i: usize) -> &Param {
        &self.params[i]
    }

    pub fn param_mut(&mut self, i: usize) -> &mut Param {
        &mut self.params[i]
    }

    pub fn count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn set_trainable(&mut self, pred: impl Fn(&str) -> bool) {
        for p in &mut self.params {
            p.trainable = pred(&p.name);
        }
    }

    /// SHA-256 over names and exact bit patterns of the selected tensors.
    pub fn checksum(&self, pred: impl Fn(&Param) -> bool) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| pred(p)) {
            h.update(p.name.as_bytes());
            h.update([0]);
            for x in &p.value.data {
                h.update(x.to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub(crate) fn norm_names(prefix: &str, kind: NormKind) -> Vec<String> {
    match kind {
        NormKind::LayerNorm => vec![format!("{prefix}.g"), format!("{prefix}.b")],
        NormKind::RmsNorm => vec![format!("{prefix}.g")],
    }
}

/// Fresh parameters: embeddings N(0, 0.02), weights U(±1/sqrt(fan_in)), biases 0, gains 1.
pub fn init_params(c: &BackboneConfig, seed: u64) -> ParamStore {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut s = ParamStore::default();
    let (d, p) = (c.d_model, c.d_proj);
    let linear = |s: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, fan_in: usize, fan_out: usize, bias: bool| {
        s.insert(name, Tensor::uniform(fan_in, fan_out, 1.0 / (fan_in as f64).sqrt(), rng));
        if bias {
            s.insert(format!("{}_b", name), Tensor::zeros(1, fan_out));
        }
    };
    let norm = |s: &mut ParamStore, prefix: &str| {
        for (i, n) in norm_names(prefix, c.norm).into_iter().enumerate() {
            s.insert(n, Tensor::filled(1, d, if i == 0 { 1.0 } else { 0.0 }));
        }
    };
    s.insert("embed.item", Tensor::randn(c.vocab_size, d, 0.02, &mut rng));
    linear(&mut s, &mut rng, "fuse.item", d, p, true);
    s.insert("fuse.type", Tensor::randn(N_TYPES, p, 0.02, &mut rng));
    linear(&mut s, &mut rng, "fuse.dt", 1, p, true);
    linear(&mut s, &mut rng, "fuse.text", c.d_text, p, true);
    linear(&mut s, &mut rng, "fuse.out", 4 * p, d, true);
    if c.pos_encoding == PosEncoding::LearnedAbsolute {
        s.insert("embed.pos", Tensor::randn(c.max_len, d, 0.02, &mut rng));
    }
    let kv = c.n_kv_heads * c.head_dim();
    let f = c.ffn_hidden();
    for l in 0..c.n_layers {
        let pre = format!("layers.{l}");
        norm(&mut s, &format!("{pre}.norm1"));
        linear(&mut s, &mut rng, &format!("{pre}.attn.wq"), d, d, c.bias);
        // A key bias shifts every score of a softmax row equally, so it is left out.
        linear(&mut s, &mut rng, &format!("{pre}.attn.wk"), d, kv, false);
        linear(&mut s, &mut rng, &format!("{pre}.attn.wv"), d, kv, c.bias);
        linear(&mut s, &mut rng, &format!("{pre}.attn.wo"), d, d, c.bias);
        norm(&mut s, &format!("{pre}.norm2"));
        let experts: Vec<String> = match c.ffn {
            FfnKind::Dense => vec![format!("{pre}.ffn")],
            FfnKind::Moe { n_experts, .. } => {
                linear(&mut s, &mut rng, &format!("{pre}.ffn.gate"), d, n_experts, false);
                (0..n_experts).map(|e| format!("{pre}.ffn.e{e}")).collect()
            }
        };
        for e in experts {
            linear(&mut s, &mut rng, &format!("{e}.w1"), d, f, c.bias);
            if c.activation == FfnActivation::Swiglu {
                linear(&mut s, &mut rng, &format!("{e}.w3"), d, f, c.bias);
            }
            linear(&mut s, &mut rng, &format!("{e}.w2"), f, d, c.bias);
        }
    }
    if c.norm_placement == NormPlacement::Pre {
        norm(&mut s, "final_norm");
    }
    if !c.tie_weights {
        linear(&mut s, &mut rng, "head.w", d, c.vocab_size, false);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;

    #[test]
    fn enumeration_matches_closed_form() {
        for preset in Preset::ALL {
            for tie in [true, false] {
                for c in [preset.config(57), preset.tiny(10)] {
                    let c = BackboneConfig { tie_weights: tie, ..c };
                    assert_eq!(init_params(&c, 0).count(), c.param_count(), "{preset} tie={tie}");
                }
            }
        }
    }

    #[test]
    fn init_is_seeded() {
        let c = Preset::Mixtral.tiny(10);
        assert_eq!(init_params(&c, 3), init_params(&c, 3));
        assert_ne!(init_params(&c, 3).checksum(|_| true), init_params(&c, 4).checksum(|_| true));
    }

    #[test]
    fn serde_round_trip_keeps_lookup() {
        let s = init_params(&Preset::Bert.tiny(10), 1);
        let back: ParamStore = serde_json::from_str(&serde_json::to_string(&s).unwrap()).unwrap();
        assert_eq!(back, s);
        assert!(back.get("layers.0.attn.wq_b").is_some());
    }
}
