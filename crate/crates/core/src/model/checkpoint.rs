//! Bit-exact checkpoint serialization.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic "DSR1" | version u32 | header_len u64 | header JSON | payload
//! ```
//!
//! The header records tensor names and shapes (in parameter order), the
//! model config, the vocabulary hash, and the trainer RNG state. The
//! payload is every tensor's f64 data concatenated in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Model, ModelConfig};
use crate::{Parameters, Tensor};

pub const MAGIC: [u8; 4] = *b"DSR1";
const VERSION: u32 = 1;

/// Snapshot of a ChaCha8 stream: the seed it is derived from and the word
/// position reached.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: u64,
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

impl RngState {
    pub fn new(seed: u64, word_pos: u128) -> Self {
        Self {
            seed,
            word_pos_hi: (word_pos >> 64) as u64,
            word_pos_lo: word_pos as u64,
        }
    }

    pub fn word_pos(&self) -> u128 {
        (u128::from(self.word_pos_hi) << 64) | u128::from(self.word_pos_lo)
    }
}

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("bad magic: expected \"DSR1\"")]
    BadMagic,
    #[error("unsupported checkpoint version {got} (supported: {VERSION})")]
    BadVersion { got: u32 },
    #[error("vocabulary hash mismatch: checkpoint {got:#018x}, expected {expected:#018x}")]
    VocabHashMismatch { expected: u64, got: u64 },
    #[error("malformed header: {0}")]
    Header(String),
    #[error("payload length {got} bytes does not match header shapes ({expected} bytes)")]
    PayloadLength { expected: usize, got: usize },
    #[error("checkpoint does not describe a valid model: {0}")]
    Model(String),
}

#[derive(Serialize, Deserialize)]
struct Header {
    tensors: Vec<(String, Vec<usize>)>,
    model_config: ModelConfig,
    vocab_hash: u64,
    rng: RngState,
}

/// Writes the model, vocab hash, and RNG state to `path`.
pub fn save_checkpoint(
    model: &Model,
    vocab_hash: u64,
    rng: RngState,
    path: &Path,
) -> Result<(), CheckpointError> {
    let header = Header {
        tensors: model
            .params
            .iter()
            .map(|(n, t)| (n.to_string(), t.shape().to_vec()))
            .collect(),
        model_config: model.config.clone(),
        vocab_hash,
        rng,
    };
    let header_bytes = serde_json::to_vec(&header).expect("header serializes");

    let payload_len: usize = model.params.iter().map(|(_, t)| t.len() * 8).sum();
    let mut bytes = Vec::with_capacity(16 + header_bytes.len() + payload_len);
    bytes.extend_from_slice(&MAGIC);
    bytes.extend_from_slice(&VERSION.to_le_bytes());
    bytes.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    bytes.extend_from_slice(&header_bytes);
    for (_, tensor) in model.params.iter() {
        for v in tensor.data() {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
    }

    fs::write(path, bytes).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Loads a checkpoint, verifying magic, version, vocabulary hash, and that
/// the payload exactly fills the header's shapes.
pub fn load_checkpoint(
    path: &Path,
    expected_vocab_hash: u64,
) -> Result<(Model, RngState), CheckpointError> {
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    if bytes.len() < 16 {
        return Err(CheckpointError::Header("file shorter than preamble".into()));
    }
    if bytes[0..4] != MAGIC {
        return Err(CheckpointError::BadMagic);
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(CheckpointError::BadVersion { got: version });
    }
    let header_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize
        .checked_add(header_len)
        .filter(|&end| end <= bytes.len())
        .ok_or_else(|| CheckpointError::Header("header length exceeds file".into()))?;
    let header: Header = serde_json::from_slice(&bytes[16..header_end])
        .map_err(|e| CheckpointError::Header(e.to_string()))?;

    if header.vocab_hash != expected_vocab_hash {
        return Err(CheckpointError::VocabHashMismatch {
            expected: expected_vocab_hash,
            got: header.vocab_hash,
        });
    }

    let expected_payload: usize = header
        .tensors
        .iter()
        .map(|(_, shape)| shape.iter().product::<usize>() * 8)
        .sum();
    let payload = &bytes[header_end..];
    if payload.len() != expected_payload {
        return Err(CheckpointError::PayloadLength {
            expected: expected_payload,
            got: payload.len(),
        });
    }

    let mut params = Parameters::new();
    let mut offset = 0;
    for (name, shape) in &header.tensors {
        let n: usize = shape.iter().product();
        let data: Vec<f64> = payload[offset..offset + n * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        offset += n * 8;
        params.insert(
            name.clone(),
            Tensor::new(shape.clone(), data).expect("shape matches data"),
        );
    }

    let model = Model::from_parts(header.model_config, params)
        .map_err(|e| CheckpointError::Model(e.to_string()))?;
    Ok((model, header.rng))
}
