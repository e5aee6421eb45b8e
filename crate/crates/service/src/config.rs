//! Optional TOML configuration shared by the CLI subcommands.
//!
//! Every section is optional; command-line flags override file values.
//!
//! ```toml
//! [synth]            # generator spec fields, e.g. sessions = 500
//! [preprocess]       # lexicon, triggers, split = { min_len = 5, ... }
//! [train]            # preset, epochs, lr, batch_size, lora = { rank = 4 }
//! [serve]            # host, port, poll_ms, idle_timeout_secs, watch = [..]
//! ```

use std::path::{Path, PathBuf};

use cmdrec_core::preprocess::{PipelineConfig, SplitConfig};
use cmdrec_core::synth::GeneratorSpec;
use cmdrec_model::{LoraSpec, Preset, TrainConfig};
use serde::Deserialize;

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub synth: GeneratorSpec,
    pub preprocess: PreprocessSection,
    pub train: TrainSection,
    pub serve: ServeSection,
}

#[derive(Debug, Clone, Default, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PreprocessSection {
    pub lexicon: Option<PathBuf>,
    /// Reviewed trigger file used instead of inferring one.
    pub triggers: Option<PathBuf>,
    pub split: SplitConfig,
    pub pipeline: PipelineConfig,
}

/// Optimizer fields (`epochs`, `lr`, ...) sit directly in the section.
#[derive(Debug, Clone, Deserialize)]
#[serde(default)]
pub struct TrainSection {
    pub preset: Preset,
    pub model_seed: u64,
    pub text_embeddings: Option<PathBuf>,
    pub lora: Option<LoraSpec>,
    #[serde(flatten)]
    pub optim: TrainConfig,
}

impl Default for TrainSection {
    fn default() -> Self {
        TrainSection {
            preset: Preset::Mistral,
            model_seed: 0,
            text_embeddings: None,
            lora: None,
            optim: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ServeSection {
    pub host: String,
    pub port: u16,
    pub poll_ms: u64,
    pub idle_timeout_secs: u64,
    pub watch: Vec<PathBuf>,
    pub text_embeddings: Option<PathBuf>,
}

impl Default for ServeSection {
    fn default() -> Self {
        ServeSection {
            host: "127.0.0.1".into(),
            port: 8700,
            poll_ms: 500,
            idle_timeout_secs: 30 * 60,
            watch: Vec::new(),
            text_embeddings: None,
        }
    }
}

impl FileConfig {
    pub fn load(path: Option<&Path>) -> anyhow::Result<FileConfig> {
        match path {
            None => Ok(FileConfig::default()),
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| anyhow::anyhow!("{}: {e}", p.display()))?;
                toml::from_str(&text).map_err(|e| anyhow::anyhow!("{}: {e}", p.display()))
            }
        }
    }
}
