//! Low-rank adapters: `W + (alpha / r) A B` with `B` starting at zero.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::network::Model;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoraTarget {
    Wq,
    Wk,
    Wv,
    Wo,
    W1,
    W2,
    W3,
}

impl LoraTarget {
    pub const ATTENTION: [LoraTarget; 4] = [LoraTarget::Wq, LoraTarget::Wk, LoraTarget::Wv, LoraTarget::Wo];

    fn suffix(self) -> &'static str {
        match self {
            LoraTarget::Wq => ".attn.wq",
            LoraTarget::Wk => ".attn.wk",
            LoraTarget::Wv => ".attn.wv",
            LoraTarget::Wo => ".attn.wo",
            LoraTarget::W1 => ".w1",
            LoraTarget::W2 => ".w2",
            LoraTarget::W3 => ".w3",
        }
    }

    pub fn matches(self, name: &str) -> bool {
        let ffn = matches!(self, LoraTarget::W1 | LoraTarget::W2 | LoraTarget::W3);
        name.starts_with("layers.") && name.ends_with(self.suffix()) && (!ffn || name.contains(".ffn"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LoraSpec {
    pub rank: usize,
    pub alpha: f64,
    pub targets: Vec<LoraTarget>,
    pub freeze_base: bool,
    /// Keeps the output head trainable when the base is frozen.
    pub train_head: bool,
}

impl Default for LoraSpec {
    fn default() -> Self {
        LoraSpec { rank: 4, alpha: 8.0, targets: LoraTarget::ATTENTION.to_vec(), freeze_base: true, train_head: true }
    }
}

impl LoraSpec {
    pub fn scaling(&self) -> f64 {
        self.alpha / self.rank as f64
    }
}

/// One adapted matrix.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Adapter {
    pub target: String,
    pub d_in: usize,
    pub d_out: usize,
    pub trainable: usize,
}

/// Attaches adapters to every matrix named by `spec.targets` and applies the freezing rule.
pub fn inject_lora(model: &mut Model, spec: LoraSpec, seed: u64) -> Result<Vec<Adapter>> {
    if model.lora.is_some() {
        return Err(ModelError::InvalidConfig("adapters are already attached".into()));
    }
    let mut found = Vec::new();
    for t in &spec.targets {
        let names: Vec<(String, usize, usize)> = model
            .params
            .iter()
            .filter(|p| t.matches(&p.name))
            .map(|p| (p.name.clone(), p.value.rows, p.value.cols))
            .collect();
        if names.is_empty() {
            return Err(ModelError::UnknownTarget(format!("{t:?}").to_lowercase()));
        }
        found.extend(names);
    }
    for (name, d_in, d_out) in &found {
        if spec.rank == 0 || spec.rank >= (*d_in).min(*d_out) {
            return Err(ModelError::RankTooLarge { target: name.clone(), rank: spec.rank, d_in: *d_in, d_out: *d_out });
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut adapters = Vec::with_capacity(found.len());
    for (name, d_in, d_out) in found {
        let a = Tensor::uniform(d_in, spec.rank, 1.0 / (d_in as f64).sqrt(), &mut rng);
        model.params.insert(format!("{name}.lora_a"), a);
        model.params.insert(format!("{name}.lora_b"), Tensor::zeros(spec.rank, d_out));
        adapters.push(Adapter { trainable: spec.rank * (d_in + d_out), target: name, d_in, d_out });
    }
    if spec.freeze_base {
        let head = if model.config.tie_weights { "embed.item" } else { "head.w" };
        let train_head = spec.train_head;
        model.params.set_trainable(|n| is_adapter(n) || (train_head && n == head));
    }
    model.lora = Some(spec);
    Ok(adapters)
}

pub fn is_adapter(name: &str) -> bool {
    name.ends_with(".lora_a") || name.ends_with(".lora_b")
}
