#![allow(dead_code)]

use cmdrec_core::features::{mask_sequences, EncodedSequence, MaskMode, MaskedBatch, Scheme, NUM_RESERVED};
use cmdrec_model::BackboneConfig;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_seq(rng: &mut ChaCha8Rng, len: usize, vocab: usize, d_text: usize) -> EncodedSequence {
    EncodedSequence {
        ids: (0..len).map(|_| rng.random_range(NUM_RESERVED..vocab as u32)).collect(),
        type_codes: (0..len).map(|_| rng.random_range(0..3)).collect(),
        dt_norm: (0..len).map(|_| rng.random_range(-2.0..2.0)).collect(),
        text_emb: (0..len).map(|_| (0..d_text).map(|_| rng.random_range(-1.0..1.0)).collect()).collect(),
    }
}

pub fn random_seqs(seed: u64, lens: &[usize], c: &BackboneConfig) -> Vec<EncodedSequence> {
    let mut r = rng(seed);
    lens.iter().map(|l| random_seq(&mut r, *l, c.vocab_size, c.d_text)).collect()
}

pub fn train_batch(seed: u64, lens: &[usize], c: &BackboneConfig) -> MaskedBatch {
    let seqs = random_seqs(seed, lens, c);
    mask_sequences(&seqs, c.default_scheme(), MaskMode::Train, 0.3, seed).unwrap()
}

/// Unmasked batch: every position valid, nothing replaced.
pub fn plain_batch(seqs: &[EncodedSequence]) -> MaskedBatch {
    let mut b = mask_sequences(seqs, Scheme::Mlm, MaskMode::Infer, 0.0, 0).unwrap();
    b.inputs = seqs.to_vec();
    let l = b.seq_len;
    let d = seqs[0].text_emb[0].len();
    for s in &mut b.inputs {
        while s.ids.len() < l {
            s.ids.push(0);
            s.type_codes.push(3);
            s.dt_norm.push(0.0);
            s.text_emb.push(vec![0.0; d]);
        }
    }
    b
}
