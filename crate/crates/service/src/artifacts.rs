//! On-disk layout of a preprocessed dataset.
//!
//! ```text
//! <data>/train.tsv, validation.tsv   clean sequences after splitting
//! <data>/vocab.tsv                   id assignment fixed from the train split
//! <data>/time_norm.json              dt normalization statistics
//! <data>/triggers.tsv                decided trigger map (editable)
//! <data>/lexicon.tsv                 translation lexicon used
//! <data>/pipeline.toml               denylists and trigger thresholds
//! <data>/report.txt                  parse and pipeline counters
//! ```

use std::fs;
use std::path::{Path, PathBuf};

use cmdrec_core::features::{Encoder, FileEmbedding, HashEmbedding, TextProvider, TimeNormStats, Vocabulary};
use cmdrec_core::preprocess::{
    sequences_from_tsv, sequences_to_tsv, CleanSequence, PipelineConfig, SplitDataset, TranslationLexicon, TriggerMap,
};

use crate::error::{Result, ServiceError};
use crate::session::OnlinePipeline;

#[derive(Debug, Clone)]
pub struct DataDir {
    pub path: PathBuf,
}

fn read(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| ServiceError::Artifact { path: path.display().to_string(), msg: e.to_string() })
}

fn artifact_err(path: &Path, e: impl ToString) -> ServiceError {
    ServiceError::Artifact { path: path.display().to_string(), msg: e.to_string() }
}

/// Everything `preprocess` produces.
pub struct Prepared<'a> {
    pub split: &'a SplitDataset,
    pub vocab: &'a Vocabulary,
    pub stats: TimeNormStats,
    pub triggers: &'a TriggerMap,
    pub lexicon: &'a TranslationLexicon,
    pub pipeline: &'a PipelineConfig,
    pub report: String,
}

impl DataDir {
    pub fn new(path: impl Into<PathBuf>) -> Self {
        DataDir { path: path.into() }
    }

    fn file(&self, name: &str) -> PathBuf {
        self.path.join(name)
    }

    pub fn write(&self, p: &Prepared<'_>) -> Result<()> {
        fs::create_dir_all(&self.path)?;
        fs::write(self.file("train.tsv"), sequences_to_tsv(&p.split.train))?;
        fs::write(self.file("validation.tsv"), sequences_to_tsv(&p.split.validation))?;
        fs::write(self.file("vocab.tsv"), p.vocab.to_tsv())?;
        fs::write(self.file("time_norm.json"), serde_json::to_string_pretty(&p.stats).expect("stats serialize"))?;
        fs::write(self.file("triggers.tsv"), p.triggers.to_tsv())?;
        fs::write(self.file("lexicon.tsv"), p.lexicon.to_tsv())?;
        let pipeline = toml::to_string(p.pipeline).map_err(|e| artifact_err(&self.file("pipeline.toml"), e))?;
        fs::write(self.file("pipeline.toml"), pipeline)?;
        fs::write(self.file("report.txt"), &p.report)?;
        Ok(())
    }

    pub fn sequences(&self, split: &str) -> Result<Vec<CleanSequence>> {
        Ok(sequences_from_tsv(&read(&self.file(&format!("{split}.tsv")))?)?)
    }

    pub fn vocab(&self) -> Result<Vocabulary> {
        Ok(Vocabulary::parse(&read(&self.file("vocab.tsv"))?)?)
    }

    pub fn time_norm(&self) -> Result<TimeNormStats> {
        let path = self.file("time_norm.json");
        serde_json::from_str(&read(&path)?).map_err(|e| artifact_err(&path, e))
    }

    pub fn triggers(&self) -> Result<TriggerMap> {
        Ok(TriggerMap::parse(&read(&self.file("triggers.tsv"))?)?)
    }

    pub fn lexicon(&self) -> Result<TranslationLexicon> {
        Ok(TranslationLexicon::parse(&read(&self.file("lexicon.tsv"))?)?)
    }

    pub fn pipeline_config(&self) -> Result<PipelineConfig> {
        let path = self.file("pipeline.toml");
        toml::from_str(&read(&path)?).map_err(|e| artifact_err(&path, e))
    }

    /// Encoder over the stored vocabulary. Name embeddings come from `text_file`
    /// when given, otherwise from trigram hashing with `d_text` buckets.
    pub fn encoder(&self, d_text: usize, text_file: Option<&Path>) -> Result<Encoder> {
        let provider = match text_file {
            Some(p) => TextProvider::File(std::sync::Arc::new(FileEmbedding::parse(&read(p)?)?)),
            None => TextProvider::Hash(HashEmbedding::new(d_text)),
        };
        Ok(Encoder::new(self.vocab()?, provider, self.time_norm()?))
    }

    pub fn online_pipeline(&self, max_len: usize) -> Result<OnlinePipeline> {
        Ok(OnlinePipeline {
            config: self.pipeline_config()?,
            lexicon: self.lexicon()?,
            triggers: self.triggers()?,
            max_len,
        })
    }
}
