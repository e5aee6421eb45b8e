//! Vocabulary, per-item side features and CLM/MLM masking.

use std::collections::HashMap;
use std::fmt::Write as _;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::logs::Category;
use crate::preprocess::CleanSequence;

pub const PAD: u32 = 0;
pub const MASK: u32 = 1;
pub const UNK: u32 = 2;
pub const NUM_RESERVED: u32 = 3;
/// Type code of positions whose category is hidden (padding, masked items).
pub const NO_TYPE: u8 = 3;
pub const DEFAULT_D_TEXT: usize = 16;

pub fn is_reserved(id: u32) -> bool {
    id < NUM_RESERVED
}

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("cannot build a vocabulary from an empty corpus")]
    EmptyCorpus,
    #[error("sequence {index} has {len} items; at least 2 are needed")]
    SequenceTooShort { index: usize, len: usize },
    #[error("empty batch")]
    EmptyBatch,
    #[error("vocabulary line {line}: {msg}")]
    VocabLine { line: usize, msg: String },
    #[error("embedding line {line}: {msg}")]
    EmbeddingLine { line: usize, msg: String },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabEntry {
    pub name: String,
    pub category: Category,
    pub loc_id: i64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Vocabulary {
    commands: Vec<VocabEntry>,
    lookup: HashMap<(String, i64), u32>,
}

pub const VOCAB_HEADER: &str = "id\tname\tcategory\tloc_id";

impl Vocabulary {
    /// One id per distinct `(name, loc_id)` in first-occurrence order.
    pub fn build<'a>(train: impl IntoIterator<Item = &'a CleanSequence>) -> Result<Vocabulary, FeatureError> {
        let mut v = Vocabulary::default();
        for s in train {
            for it in &s.items {
                v.insert(VocabEntry { name: it.name.clone(), category: it.category, loc_id: it.loc_id });
            }
        }
        if v.commands.is_empty() {
            return Err(FeatureError::EmptyCorpus);
        }
        Ok(v)
    }

    fn insert(&mut self, e: VocabEntry) -> u32 {
        let next = NUM_RESERVED + self.commands.len() as u32;
        *self.lookup.entry((e.name.clone(), e.loc_id)).or_insert_with(|| {
            self.commands.push(e);
            next
        })
    }

    /// Total id space, reserved ids included.
    pub fn size(&self) -> usize {
        NUM_RESERVED as usize + self.commands.len()
    }

    pub fn num_commands(&self) -> usize {
        self.commands.len()
    }

    pub fn id(&self, name: &str, loc_id: i64) -> u32 {
        self.lookup.get(&(name.to_string(), loc_id)).copied().unwrap_or(UNK)
    }

    pub fn get(&self, id: u32) -> Option<&VocabEntry> {
        id.checked_sub(NUM_RESERVED).and_then(|i| self.commands.get(i as usize))
    }

    pub fn commands(&self) -> impl Iterator<Item = (u32, &VocabEntry)> {
        self.commands.iter().enumerate().map(|(i, e)| (i as u32 + NUM_RESERVED, e))
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::from(VOCAB_HEADER);
        out.push('\n');
        for (id, e) in self.commands() {
            let _ = writeln!(out, "{id}\t{}\t{}\t{}", e.name, e.category, e.loc_id);
        }
        out
    }

    pub fn parse(text: &str) -> Result<Vocabulary, FeatureError> {
        let mut v = Vocabulary::default();
        let err = |line: usize, msg: &str| FeatureError::VocabLine { line, msg: msg.into() };
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() || line.starts_with("id\t") {
                continue;
            }
            let f: Vec<&str> = line.split('\t').collect();
            if f.len() != 4 {
                return Err(err(i + 1, "expected 4 fields"));
            }
            let id: u32 = f[0].parse().map_err(|_| err(i + 1, "bad id"))?;
            let entry = VocabEntry {
                name: f[1].to_string(),
                category: f[2].parse().map_err(|_| err(i + 1, "bad category"))?,
                loc_id: f[3].parse().map_err(|_| err(i + 1, "bad loc id"))?,
            };
            if v.insert(entry) != id {
                return Err(err(i + 1, "ids must be dense and start after the reserved ids"));
            }
        }
        Ok(v)
    }

    /// SHA-256 of the serialized table, hex encoded.
    pub fn content_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_tsv().as_bytes()))
    }
}

/// Character-trigram hashing into `d_text` signed buckets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HashEmbedding {
    pub d_text: usize,
}

fn fnv1a(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in bytes {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

fn normalize(v: &mut [f64]) -> bool {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm == 0.0 {
        return false;
    }
    v.iter_mut().for_each(|x| *x /= norm);
    true
}

impl HashEmbedding {
    pub fn new(d_text: usize) -> Self {
        HashEmbedding { d_text }
    }

    pub fn embed(&self, name: &str) -> Vec<f64> {
        let padded: Vec<char> = format!(" {} ", name.to_lowercase()).chars().collect();
        let mut v = vec![0.0; self.d_text];
        let mut buf = String::new();
        for w in padded.windows(3) {
            buf.clear();
            buf.extend(w);
            let h = fnv1a(buf.as_bytes());
            let sign = if h >> 63 == 0 { 1.0 } else { -1.0 };
            v[(h % self.d_text as u64) as usize] += sign;
        }
        if !normalize(&mut v) {
            // Every trigram cancelled out; fall back to one whole-name bucket.
            v[(fnv1a(name.as_bytes()) % self.d_text as u64) as usize] = 1.0;
        }
        v
    }
}

/// Precomputed vectors keyed by canonical name, hashing as the fallback.
#[derive(Debug)]
pub struct FileEmbedding {
    vectors: HashMap<String, Vec<f64>>,
    fallback: HashEmbedding,
    missing: AtomicUsize,
}

impl FileEmbedding {
    /// One row per command: the name, a tab, then whitespace-separated floats.
    pub fn parse(text: &str) -> Result<FileEmbedding, FeatureError> {
        let mut vectors = HashMap::new();
        let mut dim = None;
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: &str| FeatureError::EmbeddingLine { line: i + 1, msg: msg.into() };
            let (name, rest) = line.split_once('\t').ok_or_else(|| err("missing tab after name"))?;
            let mut v: Vec<f64> = rest
                .split_whitespace()
                .map(|x| x.parse::<f64>())
                .collect::<Result<_, _>>()
                .map_err(|_| err("bad float"))?;
            if *dim.get_or_insert(v.len()) != v.len() || v.is_empty() {
                return Err(err("inconsistent dimension"));
            }
            if !normalize(&mut v) {
                return Err(err("zero vector"));
            }
            vectors.insert(name.to_string(), v);
        }
        let d_text = dim.unwrap_or(DEFAULT_D_TEXT);
        Ok(FileEmbedding { vectors, fallback: HashEmbedding::new(d_text), missing: AtomicUsize::new(0) })
    }

    pub fn d_text(&self) -> usize {
        self.fallback.d_text
    }

    pub fn missing(&self) -> usize {
        self.missing.load(Ordering::Relaxed)
    }

    pub fn embed(&self, name: &str) -> Vec<f64> {
        match self.vectors.get(name) {
            Some(v) => v.clone(),
            None => {
                self.missing.fetch_add(1, Ordering::Relaxed);
                self.fallback.embed(name)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub enum TextProvider {
    Hash(HashEmbedding),
    File(Arc<FileEmbedding>),
}

impl TextProvider {
    pub fn d_text(&self) -> usize {
        match self {
            TextProvider::Hash(h) => h.d_text,
            TextProvider::File(f) => f.d_text(),
        }
    }

    pub fn embed(&self, name: &str) -> Vec<f64> {
        match self {
            TextProvider::Hash(h) => h.embed(name),
            TextProvider::File(f) => f.embed(name),
        }
    }
}

impl Default for TextProvider {
    fn default() -> Self {
        TextProvider::Hash(HashEmbedding::new(DEFAULT_D_TEXT))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimeNormStats {
    pub mean: f64,
    pub std: f64,
    pub clamp: f64,
}

impl Default for TimeNormStats {
    fn default() -> Self {
        TimeNormStats { mean: 0.0, std: 1.0, clamp: 5.0 }
    }
}

impl TimeNormStats {
    /// Mean and population std of `log1p(dt)` over every training item.
    pub fn from_train<'a>(train: impl IntoIterator<Item = &'a CleanSequence>, clamp: f64) -> TimeNormStats {
        let xs: Vec<f64> = train.into_iter().flat_map(|s| s.items.iter().map(|it| it.dt.max(0.0).ln_1p())).collect();
        if xs.is_empty() {
            return TimeNormStats { clamp, ..Default::default() };
        }
        let n = xs.len() as f64;
        let mean = xs.iter().sum::<f64>() / n;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
        let std = var.sqrt();
        TimeNormStats { mean, std: if std > 1e-12 && std.is_finite() { std } else { 1.0 }, clamp }
    }

    pub fn normalize(&self, delta: f64) -> f64 {
        ((delta.max(0.0).ln_1p() - self.mean) / self.std).clamp(-self.clamp, self.clamp)
    }
}

pub fn normalize_dt(deltas: &[f64], stats: &TimeNormStats) -> Vec<f64> {
    deltas.iter().map(|d| stats.normalize(*d)).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncodedSequence {
    pub ids: Vec<u32>,
    pub type_codes: Vec<u8>,
    pub dt_norm: Vec<f64>,
    pub text_emb: Vec<Vec<f64>>,
}

impl EncodedSequence {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn slice(&self, n: usize) -> EncodedSequence {
        EncodedSequence {
            ids: self.ids[..n].to_vec(),
            type_codes: self.type_codes[..n].to_vec(),
            dt_norm: self.dt_norm[..n].to_vec(),
            text_emb: self.text_emb[..n].to_vec(),
        }
    }

    /// Hides the identity of position `i`: MASK id and no side features.
    fn mask_at(&mut self, i: usize) {
        self.ids[i] = MASK;
        self.type_codes[i] = NO_TYPE;
        self.dt_norm[i] = 0.0;
        self.text_emb[i].iter_mut().for_each(|x| *x = 0.0);
    }

    fn pad_to(&mut self, len: usize, d_text: usize) {
        while self.ids.len() < len {
            self.ids.push(PAD);
            self.type_codes.push(NO_TYPE);
            self.dt_norm.push(0.0);
            self.text_emb.push(vec![0.0; d_text]);
        }
    }
}

/// Vocabulary, text provider and time statistics, all fixed from the training split.
#[derive(Debug, Clone)]
pub struct Encoder {
    pub vocab: Vocabulary,
    pub provider: TextProvider,
    pub stats: TimeNormStats,
    cache: Arc<Mutex<HashMap<String, Vec<f64>>>>,
}

impl Encoder {
    pub fn new(vocab: Vocabulary, provider: TextProvider, stats: TimeNormStats) -> Self {
        Encoder { vocab, provider, stats, cache: Arc::default() }
    }

    pub fn d_text(&self) -> usize {
        self.provider.d_text()
    }

    pub fn text(&self, name: &str) -> Vec<f64> {
        let mut cache = self.cache.lock().expect("embedding cache poisoned");
        cache.entry(name.to_string()).or_insert_with(|| self.provider.embed(name)).clone()
    }

    /// Returns the encoding and the number of UNK substitutions.
    pub fn encode(&self, seq: &CleanSequence) -> (EncodedSequence, usize) {
        let mut unk = 0;
        let mut out = EncodedSequence {
            ids: Vec::with_capacity(seq.len()),
            type_codes: Vec::with_capacity(seq.len()),
            dt_norm: Vec::with_capacity(seq.len()),
            text_emb: Vec::with_capacity(seq.len()),
        };
        for it in &seq.items {
            let id = self.vocab.id(&it.name, it.loc_id);
            unk += usize::from(id == UNK);
            out.ids.push(id);
            out.type_codes.push(it.category.code());
            out.dt_norm.push(self.stats.normalize(it.dt));
            out.text_emb.push(self.text(&it.name));
        }
        (out, unk)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Scheme {
    Clm,
    Mlm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaskMode {
    Train,
    Infer,
}

/// Padded batch; `labels[b][t]` is `Some(id)` at supervised positions only.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskedBatch {
    pub inputs: Vec<EncodedSequence>,
    pub labels: Vec<Vec<Option<u32>>>,
    pub valid: Vec<Vec<bool>>,
    pub scheme: Scheme,
    pub mode: MaskMode,
    pub seq_len: usize,
}

impl MaskedBatch {
    pub fn supervised(&self) -> usize {
        self.labels.iter().flatten().filter(|l| l.is_some()).count()
    }

    pub fn valid_len(&self, b: usize) -> usize {
        self.valid[b].iter().filter(|v| **v).count()
    }
}

/// Builds inputs and labels for one objective.
///
/// Train mode: CLM inputs drop the last item and every position predicts its
/// successor; MLM masks each item with `p_mask` (at least one per sequence).
/// UNK targets are not supervised in train mode. Infer mode supervises only the
/// last item: CLM sees the prefix before it, MLM sees it replaced by MASK.
pub fn mask_sequences(
    batch: &[EncodedSequence],
    scheme: Scheme,
    mode: MaskMode,
    p_mask: f64,
    seed: u64,
) -> Result<MaskedBatch, FeatureError> {
    if batch.is_empty() {
        return Err(FeatureError::EmptyBatch);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d_text = batch.iter().flat_map(|s| s.text_emb.first()).map(Vec::len).next().unwrap_or(0);
    let mut inputs = Vec::with_capacity(batch.len());
    let mut labels = Vec::with_capacity(batch.len());
    for (index, seq) in batch.iter().enumerate() {
        let l = seq.len();
        if l < 2 {
            return Err(FeatureError::SequenceTooShort { index, len: l });
        }
        let (input, label) = match (scheme, mode) {
            (Scheme::Clm, MaskMode::Train) => {
                let label = seq.ids[1..].iter().map(|&id| (id != UNK).then_some(id)).collect();
                (seq.slice(l - 1), label)
            }
            (Scheme::Clm, MaskMode::Infer) => {
                let mut label = vec![None; l - 1];
                label[l - 2] = Some(seq.ids[l - 1]);
                (seq.slice(l - 1), label)
            }
            (Scheme::Mlm, MaskMode::Train) => {
                let mut picked: Vec<bool> = (0..l).map(|_| rng.random_bool(p_mask)).collect();
                if !picked.iter().any(|p| *p) {
                    picked[rng.random_range(0..l)] = true;
                }
                let mut input = seq.clone();
                let mut label = vec![None; l];
                for i in (0..l).filter(|i| picked[*i]) {
                    input.mask_at(i);
                    label[i] = (seq.ids[i] != UNK).then_some(seq.ids[i]);
                }
                (input, label)
            }
            (Scheme::Mlm, MaskMode::Infer) => {
                let mut input = seq.clone();
                input.mask_at(l - 1);
                let mut label = vec![None; l];
                label[l - 1] = Some(seq.ids[l - 1]);
                (input, label)
            }
        };
        inputs.push(input);
        labels.push(label);
    }
    let seq_len = inputs.iter().map(EncodedSequence::len).max().unwrap_or(0);
    let mut valid = Vec::with_capacity(inputs.len());
    for (input, label) in inputs.iter_mut().zip(labels.iter_mut()) {
        let mut v = vec![true; input.len()];
        v.resize(seq_len, false);
        valid.push(v);
        input.pad_to(seq_len, d_text);
        label.resize(seq_len, None);
    }
    Ok(MaskedBatch { inputs, labels, valid, scheme, mode, seq_len })
}
