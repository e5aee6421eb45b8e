//! Backbone configuration and the named presets.

use std::fmt;
use std::str::FromStr;

use cmdrec_core::features::{Scheme, DEFAULT_D_TEXT};
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Directionality {
    Causal,
    Bidirectional,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PosEncoding {
    LearnedAbsolute,
    Rope,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnActivation {
    Relu,
    Gelu,
    Swiglu,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormPlacement {
    Pre,
    Post,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NormKind {
    LayerNorm,
    RmsNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FfnKind {
    Dense,
    Moe { n_experts: usize, top_k: usize },
}

/// Number of type codes: UNDO, Tool, Menu and the "no type" code.
pub const N_TYPES: usize = 4;
pub const ROPE_BASE: f64 = 10_000.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneConfig {
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub n_layers: usize,
    pub directionality: Directionality,
    pub pos_encoding: PosEncoding,
    pub activation: FfnActivation,
    pub norm_placement: NormPlacement,
    pub norm: NormKind,
    pub window: Option<usize>,
    pub ffn: FfnKind,
    pub d_ff: usize,
    pub dropout: f64,
    pub vocab_size: usize,
    pub tie_weights: bool,
    /// Biases on attention and FFN projections.
    pub bias: bool,
    pub d_proj: usize,
    pub d_text: usize,
    /// Longest input the learned position table covers.
    pub max_len: usize,
}

impl BackboneConfig {
    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Hidden width of one FFN; SwiGLU shrinks `d_ff` by 2/3.
    pub fn ffn_hidden(&self) -> usize {
        match self.activation {
            FfnActivation::Swiglu => (2 * self.d_ff / 3).max(1),
            _ => self.d_ff,
        }
    }

    pub fn default_scheme(&self) -> Scheme {
        match self.directionality {
            Directionality::Causal => Scheme::Clm,
            Directionality::Bidirectional => Scheme::Mlm,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(ModelError::InvalidConfig(m));
        if self.d_model == 0 || self.n_heads == 0 || self.n_kv_heads == 0 {
            return bad("d_model, n_heads and n_kv_heads must be positive".into());
        }
        if self.d_model % self.n_heads != 0 {
            return bad(format!("d_model {} is not divisible by n_heads {}", self.d_model, self.n_heads));
        }
        if self.n_kv_heads > self.n_heads || self.n_heads % self.n_kv_heads != 0 {
            return bad(format!("n_kv_heads {} must divide n_heads {}", self.n_kv_heads, self.n_heads));
        }
        if self.pos_encoding == PosEncoding::Rope && self.head_dim() % 2 != 0 {
            return bad(format!("RoPE needs an even head dimension, got {}", self.head_dim()));
        }
        if self.window == Some(0) {
            return bad("window must be at least 1".into());
        }
        if let FfnKind::Moe { n_experts, top_k } = self.ffn {
            if top_k == 0 || top_k > n_experts {
                return bad(format!("moe top_k {top_k} must lie in 1..={n_experts}"));
            }
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        if self.vocab_size <= cmdrec_core::features::NUM_RESERVED as usize {
            return bad(format!("vocab_size {} leaves no commands", self.vocab_size));
        }
        if self.d_ff == 0 || self.d_proj == 0 || self.d_text == 0 || self.max_len == 0 {
            return bad("d_ff, d_proj, d_text and max_len must be positive".into());
        }
        Ok(())
    }

    /// Closed-form parameter count, including any untied head.
    pub fn param_count(&self) -> usize {
        let (d, v, p) = (self.d_model, self.vocab_size, self.d_proj);
        let b = usize::from(self.bias);
        let norm = match self.norm {
            NormKind::LayerNorm => 2 * d,
            NormKind::RmsNorm => d,
        };
        let kv = self.n_kv_heads * self.head_dim();
        let attn = d * d + 2 * d * kv + d * d + b * (d + kv + d);
        let f = self.ffn_hidden();
        let expert = match self.activation {
            FfnActivation::Swiglu => 3 * d * f + b * (2 * f + d),
            _ => 2 * d * f + b * (f + d),
        };
        let ffn = match self.ffn {
            FfnKind::Dense => expert,
            FfnKind::Moe { n_experts, .. } => d * n_experts + n_experts * expert,
        };
        let fusion = v * d + (d * p + p) + N_TYPES * p + 2 * p + (self.d_text * p + p) + (4 * p * d + d);
        let pos = if self.pos_encoding == PosEncoding::LearnedAbsolute { self.max_len * d } else { 0 };
        let final_norm = if self.norm_placement == NormPlacement::Pre { norm } else { 0 };
        let head = if self.tie_weights { 0 } else { d * v };
        fusion + pos + self.n_layers * (attn + ffn + 2 * norm) + final_norm + head
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Llama2,
    Mixtral,
    Mistral,
    Bert,
    EncoderMlm,
}

impl Preset {
    pub const ALL: [Preset; 5] = [Preset::Llama2, Preset::Mixtral, Preset::Mistral, Preset::Bert, Preset::EncoderMlm];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Llama2 => "llama2",
            Preset::Mixtral => "mixtral",
            Preset::Mistral => "mistral",
            Preset::Bert => "bert",
            Preset::EncoderMlm => "encoder-mlm",
        }
    }

    /// Causal, RoPE, SwiGLU, pre-norm.
    pub fn is_llm_style(self) -> bool {
        matches!(self, Preset::Llama2 | Preset::Mixtral | Preset::Mistral)
    }

    /// The published shape of the family; only llama2 differs from [`Preset::config`].
    pub fn named_shape(self, vocab_size: usize) -> BackboneConfig {
        let mut c = self.config(vocab_size);
        if self == Preset::Llama2 {
            c.n_heads = 32;
            c.n_kv_heads = 32;
            c.n_layers = 32;
        }
        c
    }

    /// Desk-scale instantiation.
    pub fn config(self, vocab_size: usize) -> BackboneConfig {
        let d_model = 64;
        let llm = BackboneConfig {
            d_model,
            n_heads: 8,
            n_kv_heads: 8,
            n_layers: 2,
            directionality: Directionality::Causal,
            pos_encoding: PosEncoding::Rope,
            activation: FfnActivation::Swiglu,
            norm_placement: NormPlacement::Pre,
            norm: NormKind::RmsNorm,
            window: None,
            ffn: FfnKind::Dense,
            d_ff: 4 * d_model,
            dropout: 0.1,
            vocab_size,
            tie_weights: true,
            bias: false,
            d_proj: 32,
            d_text: DEFAULT_D_TEXT,
            max_len: 100,
        };
        let encoder = BackboneConfig {
            directionality: Directionality::Bidirectional,
            activation: FfnActivation::Gelu,
            norm_placement: NormPlacement::Post,
            norm: NormKind::LayerNorm,
            bias: true,
            ..llm.clone()
        };
        match self {
            Preset::Llama2 => llm,
            Preset::Mixtral => BackboneConfig {
                n_kv_heads: 2,
                window: Some(32),
                ffn: FfnKind::Moe { n_experts: 8, top_k: 2 },
                ..llm
            },
            Preset::Mistral => BackboneConfig { n_kv_heads: 2, window: Some(32), n_layers: 4, ..llm },
            Preset::Bert => BackboneConfig { pos_encoding: PosEncoding::LearnedAbsolute, n_layers: 4, ..encoder },
            Preset::EncoderMlm => encoder,
        }
    }

    /// Gradient-check scale: d_model 8, two heads, short windows.
    pub fn tiny(self, vocab_size: usize) -> BackboneConfig {
        let mut c = self.config(vocab_size);
        c.d_model = 8;
        c.n_heads = 2;
        c.n_kv_heads = if c.n_kv_heads < 8 { 1 } else { 2 };
        c.n_layers = c.n_layers.min(2);
        c.d_ff = 16;
        c.d_proj = 4;
        c.d_text = 4;
        c.max_len = 16;
        c.window = c.window.map(|_| 3);
        if let FfnKind::Moe { top_k, .. } = c.ffn {
            c.ffn = FfnKind::Moe { n_experts: 4, top_k };
        }
        c
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = ModelError;

    fn from_str(s: &str) -> Result<Preset> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| ModelError::InvalidConfig(format!("unknown preset {s:?}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate_and_match_table() {
        for p in Preset::ALL {
            p.config(60).validate().unwrap();
            p.tiny(10).validate().unwrap();
            p.named_shape(60).validate().unwrap();
            assert_eq!(p.name().parse::<Preset>().unwrap(), p);
        }
        let l = Preset::Llama2.named_shape(60);
        assert_eq!((l.n_heads, l.n_layers, l.directionality), (32, 32, Directionality::Causal));
        let m = Preset::Mixtral.config(60);
        assert_eq!((m.n_heads, m.n_layers, m.ffn), (8, 2, FfnKind::Moe { n_experts: 8, top_k: 2 }));
        assert!(m.n_kv_heads < m.n_heads && m.window.is_some());
        let s = Preset::Mistral.config(60);
        assert_eq!((s.n_heads, s.n_layers, s.ffn), (8, 4, FfnKind::Dense));
        let b = Preset::Bert.config(60);
        assert_eq!((b.n_heads, b.n_layers, b.pos_encoding), (8, 4, PosEncoding::LearnedAbsolute));
        assert_eq!((b.activation, b.norm_placement), (FfnActivation::Gelu, NormPlacement::Post));
        let e = Preset::EncoderMlm.config(60);
        assert_eq!((e.n_heads, e.n_layers, e.directionality), (8, 2, Directionality::Bidirectional));
    }

    #[test]
    fn invalid_configs_are_rejected() {
        let base = Preset::Mistral.config(60);
        for bad in [
            BackboneConfig { n_heads: 7, ..base.clone() },
            BackboneConfig { n_kv_heads: 3, ..base.clone() },
            BackboneConfig { window: Some(0), ..base.clone() },
            BackboneConfig { ffn: FfnKind::Moe { n_experts: 2, top_k: 3 }, ..base.clone() },
            BackboneConfig { vocab_size: 3, ..base.clone() },
            BackboneConfig { dropout: 1.0, ..base.clone() },
        ] {
            assert!(matches!(bad.validate(), Err(ModelError::InvalidConfig(_))));
        }
    }

    #[test]
    fn tied_head_saves_vocab_times_width() {
        let tied = Preset::Bert.config(77);
        let untied = BackboneConfig { tie_weights: false, ..tied.clone() };
        assert_eq!(untied.param_count() - tied.param_count(), 77 * 64);
    }
}
