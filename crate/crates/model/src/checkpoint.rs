//! Binary checkpoints: magic, JSON header, then raw little-endian f64 data.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::BackboneConfig;
use crate::error::{ModelError, Result};
use crate::lora::LoraSpec;
use crate::network::Model;
use crate::params::{Param, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"CMDRECK1";
pub const VERSION: u32 = 1;

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    rows: usize,
    cols: usize,
    trainable: bool,
    /// Offset in f64 values from the start of the data block.
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    version: u32,
    config: BackboneConfig,
    lora: Option<LoraSpec>,
    vocab_hash: String,
    tensors: Vec<Entry>,
}

pub fn to_bytes(model: &Model, vocab_hash: &str) -> Result<Vec<u8>> {
    let mut offset = 0;
    let tensors = model
        .params
        .iter()
        .map(|p| {
            let e = Entry { name: p.name.clone(), rows: p.value.rows, cols: p.value.cols, trainable: p.trainable, offset };
            offset += p.value.len();
            e
        })
        .collect();
    let header = Header {
        version: VERSION,
        config: model.config.clone(),
        lora: model.lora.clone(),
        vocab_hash: vocab_hash.to_string(),
        tensors,
    };
    let json = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(12 + json.len() + offset * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in model.params.iter() {
        for x in &p.value.data {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(out)
}

/// Decodes a checkpoint; with `expected_hash`, refuses a different vocabulary.
pub fn from_bytes(bytes: &[u8], expected_hash: Option<&str>) -> Result<(Model, String)> {
    let bad = |m: &str| ModelError::Checkpoint(m.to_string());
    if bytes.len() < 12 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
    let json = bytes.get(12..12 + len).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(json)?;
    if header.version != VERSION {
        return Err(bad(&format!("unsupported version {}", header.version)));
    }
    if let Some(expected) = expected_hash {
        if expected != header.vocab_hash {
            return Err(ModelError::VocabMismatch { expected: header.vocab_hash, found: expected.to_string() });
        }
    }
    let data = &bytes[12 + len..];
    let mut params = Vec::with_capacity(header.tensors.len());
    for e in header.tensors {
        let n = e.rows * e.cols;
        let raw = data.get(e.offset * 8..(e.offset + n) * 8).ok_or_else(|| bad("truncated tensor data"))?;
        let values = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        params.push(Param { name: e.name, value: Tensor::from_vec(e.rows, e.cols, values), trainable: e.trainable });
    }
    header.config.validate()?;
    Ok((Model { config: header.config, params: ParamStore::from(params), lora: header.lora }, header.vocab_hash))
}

pub fn save(path: &Path, model: &Model, vocab_hash: &str) -> Result<()> {
    fs::write(path, to_bytes(model, vocab_hash)?)?;
    Ok(())
}

pub fn load(path: &Path, vocab_hash: &str) -> Result<Model> {
    Ok(from_bytes(&fs::read(path)?, Some(vocab_hash))?.0)
}

/// Loads without checking the vocabulary; returns the stored hash.
pub fn load_unchecked(path: &Path) -> Result<(Model, String)> {
    from_bytes(&fs::read(path)?, None)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::Preset;

    #[test]
    fn round_trip_is_exact_and_hash_guarded() {
        let m = Model::new(Preset::Mixtral.tiny(10), 5).unwrap();
        let bytes = to_bytes(&m, "abc").unwrap();
        let (back, hash) = from_bytes(&bytes, Some("abc")).unwrap();
        assert_eq!(hash, "abc");
        assert_eq!(back, m);
        assert!(matches!(from_bytes(&bytes, Some("xyz")), Err(ModelError::VocabMismatch { .. })));
        assert!(matches!(from_bytes(&bytes[..40], None), Err(ModelError::Checkpoint(_)) | Err(ModelError::Json(_))));
        assert!(matches!(from_bytes(b"garbage!garbage!", None), Err(ModelError::Checkpoint(_))));
    }
}
