//! Next-command prediction over a cleaned history.

use cmdrec_core::features::{mask_sequences, Encoder, MaskMode, Scheme, Vocabulary};
use cmdrec_core::logs::Category;
use cmdrec_core::preprocess::{CleanItem, CleanSequence};
use cmdrec_model::eval::{fit_to_model, max_sequence};
use cmdrec_model::network::softmax;
use cmdrec_model::{top_k, Model, ModelError};
use serde::{Deserialize, Serialize};

use crate::error::{Result, ServiceError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub name: String,
    pub category: Category,
    pub loc_id: i64,
    /// Softmax probability over the whole id space.
    pub score: f64,
}

/// An immutable model with the encoder it was trained with.
#[derive(Debug)]
pub struct Predictor {
    model: Model,
    encoder: Encoder,
    scheme: Scheme,
    tag: String,
}

impl Predictor {
    pub fn new(model: Model, encoder: Encoder, scheme: Option<Scheme>) -> Result<Self> {
        let c = &model.config;
        if encoder.vocab.size() != c.vocab_size {
            return Err(ModelError::DimensionMismatch(format!(
                "vocabulary has {} ids, model expects {}",
                encoder.vocab.size(),
                c.vocab_size
            ))
            .into());
        }
        if encoder.d_text() != c.d_text {
            return Err(ModelError::DimensionMismatch(format!(
                "text embeddings have {} dims, model expects {}",
                encoder.d_text(),
                c.d_text
            ))
            .into());
        }
        let scheme = scheme.unwrap_or_else(|| c.default_scheme());
        let digest = model.params.checksum(|_| true);
        let tag = format!("d{}-l{}-{:?}-{}", c.d_model, c.n_layers, scheme, &digest[..12]).to_lowercase();
        Ok(Predictor { model, encoder, scheme, tag })
    }

    pub fn tag(&self) -> &str {
        &self.tag
    }

    pub fn vocab(&self) -> &Vocabulary {
        &self.encoder.vocab
    }

    pub fn model(&self) -> &Model {
        &self.model
    }

    /// Maps command names to history items; the first vocabulary entry with
    /// a matching name wins.
    pub fn resolve(&self, names: &[String]) -> Result<Vec<CleanItem>> {
        names
            .iter()
            .map(|n| {
                let (_, e) = self
                    .vocab()
                    .commands()
                    .find(|(_, e)| e.name == *n)
                    .ok_or_else(|| ServiceError::UnknownCommand(n.clone()))?;
                Ok(CleanItem { name: e.name.clone(), category: e.category, loc_id: e.loc_id, dt: 0.0 })
            })
            .collect()
    }

    /// Top-`k` next commands after `history`, best first.
    pub fn predict(&self, history: &[CleanItem], k: usize) -> Result<Vec<Prediction>> {
        if k == 0 {
            return Err(ServiceError::InvalidK);
        }
        if history.is_empty() {
            return Err(ServiceError::EmptyPrefix);
        }
        // The slot being predicted; CLM never sees it and MLM masks it.
        let mut items = history.to_vec();
        items.push(CleanItem { name: String::new(), category: Category::Undo, loc_id: 0, dt: 0.0 });
        let (encoded, _) = self.encoder.encode(&CleanSequence { session_id: String::new(), items });
        let encoded = fit_to_model(&encoded, max_sequence(&self.model, self.scheme));
        let batch = mask_sequences(&[encoded], self.scheme, MaskMode::Infer, 0.0, 0)?;
        let scores = self.model.supervised_scores(&batch)?;
        let (_, _, _, logits) = scores.into_iter().next().ok_or(ModelError::NoSupervisedPositions)?;
        let probs = softmax(&logits);
        Ok(top_k(&logits, k)
            .items
            .into_iter()
            .filter_map(|(id, _)| {
                let e = self.vocab().get(id)?;
                Some(Prediction { name: e.name.clone(), category: e.category, loc_id: e.loc_id, score: probs[id as usize] })
            })
            .collect())
    }
}
