use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::CleanSequence;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitConfig {
    pub min_len: usize,
    pub max_len: usize,
    pub train_frac: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { min_len: 5, max_len: 100, train_frac: 0.8, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Vec<CleanSequence>,
    pub validation: Vec<CleanSequence>,
    pub split_seed: u64,
}

/// Cut lengths for a sequence of `len` items. Every piece lies in
/// `[min_len, max_len]`; the last piece is whatever remains.
fn cut_lengths(len: usize, min_len: usize, max_len: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    let mut out = Vec::new();
    let mut remaining = len;
    while remaining > max_len {
        let hi = max_len.min(remaining - min_len);
        let take = rng.random_range(min_len..=hi);
        out.push(take);
        remaining -= take;
    }
    out.push(remaining);
    out
}

/// Drops short sequences, cuts long ones at random item boundaries and
/// partitions the pieces into train/validation. Each piece's first `dt` is reset to 0.
pub fn sessionize_and_split(sequences: &[CleanSequence], config: &SplitConfig) -> SplitDataset {
    assert!(
        config.min_len >= 1 && config.max_len + 1 >= 2 * config.min_len,
        "max_len must be at least 2*min_len - 1"
    );
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut pieces = Vec::new();
    for seq in sequences.iter().filter(|s| s.len() >= config.min_len) {
        let mut start = 0;
        let lengths = cut_lengths(seq.len(), config.min_len, config.max_len, &mut rng);
        let multi = lengths.len() > 1;
        for (k, n) in lengths.into_iter().enumerate() {
            let mut items = seq.items[start..start + n].to_vec();
            items[0].dt = 0.0;
            let session_id = if multi { format!("{}#{k}", seq.session_id) } else { seq.session_id.clone() };
            pieces.push(CleanSequence { session_id, items });
            start += n;
        }
    }
    let mut order: Vec<usize> = (0..pieces.len()).collect();
    order.shuffle(&mut rng);
    let n_train = (config.train_frac * pieces.len() as f64).round() as usize;
    let mut is_train = vec![false; pieces.len()];
    for &i in &order[..n_train] {
        is_train[i] = true;
    }
    let (mut train, mut validation) = (Vec::new(), Vec::new());
    for (piece, t) in pieces.into_iter().zip(is_train) {
        if t {
            train.push(piece);
        } else {
            validation.push(piece);
        }
    }
    SplitDataset { train, validation, split_seed: config.seed }
}
