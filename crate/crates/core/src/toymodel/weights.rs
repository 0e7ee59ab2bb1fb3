//! Versioned binary container for denoiser weights.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "LGWEIGHT"
//! schema    u32
//! header    u32 length + JSON (config, vocabulary, schedule, tensor table)
//! payload   f32 tensor data in table order
//! ```
//!
//! Each table entry records the tensor's name, shape, byte offset into the
//! payload and the SHA-256 of its bytes.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::denoiser::{DenoiserConfig, DenoiserWeights, Tensor};
use super::vocab::Vocabulary;
use crate::error::{Error, Result};
use crate::image_io::write_atomic;
use crate::rng::RNG_ALGORITHM;
use crate::sampler::ScheduleInfo;

pub const MAGIC: &[u8; 8] = b"LGWEIGHT";
pub const SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
    sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    config: DenoiserConfig,
    vocabulary: Vocabulary,
    schedule: ScheduleInfo,
    rng: String,
    tensors: Vec<TensorEntry>,
}

/// Weights together with the metadata stored alongside them.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightsFile {
    pub weights: DenoiserWeights,
    pub schedule: ScheduleInfo,
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex(&Sha256::digest(bytes))
}

fn tensor_bytes(t: &Tensor) -> Vec<u8> {
    t.data.iter().flat_map(|x| x.to_le_bytes()).collect()
}

/// Checksum over all tensor bytes in table order. Identical weights always
/// give identical checksums.
pub fn weights_checksum(w: &DenoiserWeights) -> String {
    let mut h = Sha256::new();
    for t in &w.tensors {
        h.update(t.name.as_bytes());
        h.update(tensor_bytes(t));
    }
    hex(&h.finalize())
}

pub fn encode(file: &WeightsFile) -> Result<Vec<u8>> {
    let mut payload = Vec::new();
    let mut entries = Vec::with_capacity(file.weights.tensors.len());
    for t in &file.weights.tensors {
        let bytes = tensor_bytes(t);
        entries.push(TensorEntry {
            name: t.name.clone(),
            rows: t.rows,
            cols: t.cols,
            offset: payload.len(),
            sha256: sha256_hex(&bytes),
        });
        payload.extend_from_slice(&bytes);
    }
    let header = Header {
        config: file.weights.config,
        vocabulary: Vocabulary::default(),
        schedule: file.schedule.clone(),
        rng: RNG_ALGORITHM.to_string(),
        tensors: entries,
    };
    let header = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + header.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&SCHEMA_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    out.extend_from_slice(&payload);
    Ok(out)
}

pub fn decode(bytes: &[u8], path: &Path) -> Result<WeightsFile> {
    let bad = |reason: String| Error::Weights {
        path: path.to_path_buf(),
        reason,
    };
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a weights file (bad magic)".into()));
    }
    let schema = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if schema != SCHEMA_VERSION {
        return Err(bad(format!("unsupported schema version {schema}")));
    }
    let hlen = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
    let header_end = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| bad("truncated header".into()))?;
    let header: Header =
        serde_json::from_slice(&bytes[16..header_end]).map_err(|e| bad(format!("header: {e}")))?;
    if header.vocabulary != Vocabulary::default() {
        return Err(bad("vocabulary differs from this build".into()));
    }
    let payload = &bytes[header_end..];
    let mut tensors = Vec::with_capacity(header.tensors.len());
    for e in &header.tensors {
        let len = e.rows * e.cols * 4;
        let chunk = payload
            .get(e.offset..e.offset + len)
            .ok_or_else(|| bad(format!("tensor {} out of bounds", e.name)))?;
        if sha256_hex(chunk) != e.sha256 {
            return Err(bad(format!("checksum mismatch for tensor {}", e.name)));
        }
        let data = chunk
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        tensors.push(Tensor {
            name: e.name.clone(),
            rows: e.rows,
            cols: e.cols,
            data,
        });
    }
    let weights = DenoiserWeights::from_tensors(header.config, tensors).map_err(|e| bad(e.to_string()))?;
    if weights.tensors.iter().flat_map(|t| &t.data).any(|x| !x.is_finite()) {
        return Err(bad("non-finite parameter".into()));
    }
    Ok(WeightsFile {
        weights,
        schedule: header.schedule,
    })
}

pub fn save_weights(file: &WeightsFile, path: &Path) -> Result<()> {
    write_atomic(path, &encode(file)?)
}

pub fn load_weights(path: &Path) -> Result<WeightsFile> {
    let bytes = fs::read(path).map_err(|e| Error::Weights {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    decode(&bytes, path)
}

impl DenoiserConfig {
    /// Convenience for callers holding only a config.
    pub fn fresh_weights(self, seed: u64) -> Result<DenoiserWeights> {
        DenoiserWeights::init(self, &mut crate::rng::SeededRng::new(seed, crate::rng::stream::WEIGHT_INIT))
    }
}
