//! Model checkpoints: a JSON manifest next to a flat little-endian f64 payload
//! holding E, M, b, W in that order, each row-major.

use std::path::Path;

use serde::{Deserialize, Serialize};
use ssfo_core::linalg::Matrix;
use ssfo_core::{ToyLM, Vocabulary};

use crate::error::{CliError, Result};
use crate::io;

pub const MANIFEST_FILE: &str = "model.json";
pub const PAYLOAD_FILE: &str = "model.bin";
const FORMAT: &str = "ssfo-toylm-v1";
const MATRIX_ORDER: [&str; 4] = ["E", "M", "b", "W"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlockLayout {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
    pub bytes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointManifest {
    pub format: String,
    pub vocab_size: usize,
    pub hidden_dim: usize,
    pub matrix_order: Vec<String>,
    pub blocks: Vec<BlockLayout>,
    pub endianness: String,
    pub payload: String,
    pub payload_bytes: usize,
    pub payload_sha256: String,
    pub vocab: Vocabulary,
}

/// Block shapes in payload order.
fn layout(v: usize, d: usize) -> Vec<BlockLayout> {
    let shapes = [(v, d), (d, d), (1, d), (v, d)];
    let mut offset = 0;
    MATRIX_ORDER
        .iter()
        .zip(shapes)
        .map(|(name, (rows, cols))| {
            let bytes = 8 * rows * cols;
            let block = BlockLayout { name: name.to_string(), rows, cols, offset, bytes };
            offset += bytes;
            block
        })
        .collect()
}

pub fn encode_payload(model: &ToyLM) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 * model.param_count());
    for block in model.param_blocks() {
        for v in block {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn manifest_for(model: &ToyLM, payload: &[u8]) -> CheckpointManifest {
    let (v, d) = (model.vocab_size(), model.hidden_dim());
    CheckpointManifest {
        format: FORMAT.into(),
        vocab_size: v,
        hidden_dim: d,
        matrix_order: MATRIX_ORDER.iter().map(|s| s.to_string()).collect(),
        blocks: layout(v, d),
        endianness: "little".into(),
        payload: PAYLOAD_FILE.into(),
        payload_bytes: payload.len(),
        payload_sha256: io::sha256_hex(payload),
        vocab: model.vocab.clone(),
    }
}

/// Writes `model.bin` then `model.json` into `dir`; returns both paths.
pub fn save(model: &ToyLM, dir: &Path) -> Result<[std::path::PathBuf; 2]> {
    io::ensure_dir(dir)?;
    let payload = encode_payload(model);
    let manifest = manifest_for(model, &payload);
    let payload_path = dir.join(PAYLOAD_FILE);
    let manifest_path = dir.join(MANIFEST_FILE);
    io::write_atomic(&payload_path, &payload)?;
    io::write_atomic(&manifest_path, &io::to_json_bytes(&manifest))?;
    Ok([payload_path, manifest_path])
}

/// Loads a checkpoint, checking layout, length and digest before decoding.
/// `producer` names the command expected to have written it.
pub fn load(dir: &Path, producer: &'static str) -> Result<ToyLM> {
    let manifest_path = io::require(dir.join(MANIFEST_FILE), producer)?;
    let payload_path = io::require(dir.join(PAYLOAD_FILE), producer)?;
    let manifest: CheckpointManifest = io::read_json(&manifest_path)?;
    let corrupt = |path: &Path, message: String| CliError::Corrupt { path: path.into(), message };
    let (v, d) = (manifest.vocab_size, manifest.hidden_dim);
    if manifest.format != FORMAT {
        return Err(corrupt(&manifest_path, format!("unknown format {:?}", manifest.format)));
    }
    if manifest.endianness != "little" {
        return Err(corrupt(&manifest_path, format!("unsupported endianness {:?}", manifest.endianness)));
    }
    if manifest.matrix_order != MATRIX_ORDER || manifest.blocks != layout(v, d) {
        return Err(corrupt(&manifest_path, "block layout does not match E, M, b, W at the declared sizes".into()));
    }
    if manifest.vocab.len() != v {
        return Err(corrupt(&manifest_path, format!("vocabulary has {} tokens, manifest says {v}", manifest.vocab.len())));
    }
    let payload = io::read_bytes(&payload_path)?;
    let expected = 8 * (2 * v * d + d * d + d);
    if payload.len() != expected || manifest.payload_bytes != expected {
        return Err(corrupt(&payload_path, format!("payload has {} bytes, expected {expected}", payload.len())));
    }
    if io::sha256_hex(&payload) != manifest.payload_sha256 {
        return Err(corrupt(&payload_path, "payload digest does not match the manifest".into()));
    }
    let floats: Vec<f64> = payload
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    let (e, rest) = floats.split_at(v * d);
    let (m, rest) = rest.split_at(d * d);
    let (b, w) = rest.split_at(d);
    let matrix = |rows, cols, data: &[f64]| Matrix::from_vec(rows, cols, data.to_vec()).expect("sized by layout");
    Ok(ToyLM::new(manifest.vocab, matrix(v, d, e), matrix(d, d, m), b.to_vec(), matrix(v, d, w))?)
}
