//! Ranking and last-item evaluation.

use cmdrec_core::features::{is_reserved, mask_sequences, EncodedSequence, MaskMode, Scheme, NUM_RESERVED, UNK};
use cmdrec_core::metrics::{EvalInstance, MetricsReport};
use serde::{Deserialize, Serialize};

use crate::error::{ModelError, Result};
use crate::network::Model;

/// Top commands, descending score; ties go to the lower id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedPrediction {
    pub items: Vec<(u32, f64)>,
}

impl RankedPrediction {
    pub fn ids(&self) -> Vec<u32> {
        self.items.iter().map(|(id, _)| *id).collect()
    }
}

/// The `k` best non-reserved ids of one logits row. `k` above the number of
/// commands is clamped with a warning.
pub fn top_k(logits: &[f64], k: usize) -> RankedPrediction {
    let available = logits.len().saturating_sub(NUM_RESERVED as usize);
    let k = if k > available {
        log::warn!("k = {k} exceeds the {available} commands in the vocabulary; clamped");
        available
    } else {
        k
    };
    let mut ids: Vec<u32> = (0..logits.len() as u32).filter(|i| !is_reserved(*i)).collect();
    ids.sort_by(|a, b| logits[*b as usize].total_cmp(&logits[*a as usize]).then(a.cmp(b)));
    RankedPrediction { items: ids.into_iter().take(k).map(|i| (i, logits[i as usize])).collect() }
}

/// Keeps the most recent items that fit the model.
pub fn fit_to_model(seq: &EncodedSequence, keep: usize) -> EncodedSequence {
    let skip = seq.len().saturating_sub(keep);
    EncodedSequence {
        ids: seq.ids[skip..].to_vec(),
        type_codes: seq.type_codes[skip..].to_vec(),
        dt_norm: seq.dt_norm[skip..].to_vec(),
        text_emb: seq.text_emb[skip..].to_vec(),
    }
}

/// Longest raw sequence whose masked input still fits the position range.
pub fn max_sequence(model: &Model, scheme: Scheme) -> usize {
    match scheme {
        Scheme::Clm => model.config.max_len + 1,
        Scheme::Mlm => model.config.max_len,
    }
}

/// Rank of the last item of every sequence under infer-mode masking.
/// Returns `(instances, skipped)`; sequences with an UNK last item or fewer
/// than two items are skipped.
pub fn eval_instances(
    model: &Model,
    sequences: &[EncodedSequence],
    scheme: Scheme,
    batch_size: usize,
) -> Result<(Vec<EvalInstance>, usize)> {
    let keep = max_sequence(model, scheme);
    let mut usable = Vec::with_capacity(sequences.len());
    let mut skipped = 0;
    for s in sequences {
        if s.len() < 2 || s.ids[s.len() - 1] == UNK {
            skipped += 1;
        } else {
            usable.push(fit_to_model(s, keep));
        }
    }
    let mut instances = Vec::with_capacity(usable.len());
    for chunk in usable.chunks(batch_size.max(1)) {
        let batch = mask_sequences(chunk, scheme, MaskMode::Infer, 0.0, 0)?;
        for (_, _, label, scores) in model.supervised_scores(&batch)? {
            instances.push(EvalInstance::from_scores(&scores, label, is_reserved));
        }
    }
    Ok((instances, skipped))
}

pub fn evaluate(model: &Model, sequences: &[EncodedSequence], scheme: Scheme, ks: &[usize]) -> Result<MetricsReport> {
    let (instances, skipped) = eval_instances(model, sequences, scheme, 64)?;
    MetricsReport::from_instances(&instances, ks, skipped).map_err(ModelError::from)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn unique_max_and_ties() {
        let mut l = vec![0.0; 12];
        l[7] = 3.0;
        assert_eq!(top_k(&l, 1).ids(), vec![7]);
        l[3] = 5.0;
        l[9] = 5.0;
        assert_eq!(top_k(&l, 3).ids(), vec![3, 9, 7]);
    }

    #[test]
    fn reserved_ids_never_ranked_and_k_clamped() {
        let l = vec![9.0, 8.0, 7.0, 1.0, 2.0];
        assert_eq!(top_k(&l, 10).ids(), vec![4, 3]);
    }

    proptest! {
        #[test]
        fn matches_full_sort(l in proptest::collection::vec(-3i32..3, 8..40), k in 1usize..6) {
            let logits: Vec<f64> = l.iter().map(|x| *x as f64 * 0.5).collect();
            let mut all: Vec<(u32, f64)> = logits.iter().enumerate().skip(3).map(|(i, s)| (i as u32, *s)).collect();
            all.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            all.truncate(k);
            prop_assert_eq!(top_k(&logits, k).items, all);
        }
    }
}
