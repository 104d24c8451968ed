//! HMGW checkpoint files.
//!
//! ```text
//! "HMGW" | version u32 | header length u64 | JSON header | f32 tensor blobs
//! ```
//!
//! The header carries the config, discretizer, input normalization,
//! provenance and a directory of `(name, shape, offset, len)` per tensor.
//! Offsets are in bytes from the start of the blob section. All integers and
//! floats are little-endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Discretizer, GptError, InputNorm, ModelCheckpoint, ModelConfig, Provenance, Weights};

pub const MAGIC: [u8; 4] = *b"HMGW";
pub const VERSION: u32 = 1;
const PREFIX: usize = 16;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
    discretizer: Discretizer,
    input_norm: InputNorm,
    provenance: Provenance,
    tensors: Vec<TensorEntry>,
}

/// Serializes a checkpoint. Weights are written as `f32`.
pub fn encode_checkpoint(c: &ModelCheckpoint) -> Vec<u8> {
    let mut offset = 0;
    let tensors = c
        .config
        .tensor_specs()
        .into_iter()
        .map(|s| {
            let e = TensorEntry {
                len: s.len(),
                name: s.name,
                shape: s.shape,
                offset,
            };
            offset += 4 * e.len;
            e
        })
        .collect();
    let header = Header {
        config: c.config.clone(),
        discretizer: c.discretizer.clone(),
        input_norm: c.input_norm.clone(),
        provenance: c.provenance.clone(),
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(PREFIX + json.len() + offset);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for t in c.weights.tensors() {
        for &v in t {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

/// Parses a checkpoint. Never panics on malformed input.
pub fn decode_checkpoint(bytes: &[u8]) -> Result<ModelCheckpoint, GptError> {
    if bytes.len() < 4 || bytes[..4] != MAGIC {
        return Err(GptError::BadMagic);
    }
    if bytes.len() < PREFIX {
        return Err(GptError::Header(format!("file of {} bytes ends inside the prefix", bytes.len())));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(GptError::UnsupportedVersion(version));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes"));
    let rest = &bytes[PREFIX..];
    let hlen = usize::try_from(hlen).ok().filter(|&h| h <= rest.len()).ok_or_else(|| {
        GptError::Header(format!("header length {hlen} exceeds the {} bytes available", rest.len()))
    })?;
    let header: Header = serde_json::from_slice(&rest[..hlen]).map_err(|e| GptError::Header(e.to_string()))?;
    header.config.validate()?;
    let blob = &rest[hlen..];
    let specs = header.config.tensor_specs();
    if specs.len() != header.tensors.len() {
        return Err(GptError::Header(format!(
            "{} tensors listed, config needs {}",
            header.tensors.len(),
            specs.len()
        )));
    }
    let mut tensors = Vec::with_capacity(specs.len());
    let mut expected_offset = 0usize;
    for (spec, entry) in specs.iter().zip(&header.tensors) {
        if spec.name != entry.name || spec.shape != entry.shape || entry.len != spec.len() || entry.offset != expected_offset {
            return Err(GptError::Header(format!("tensor `{}` does not match the config", entry.name)));
        }
        let end = entry.offset + 4 * entry.len;
        if end > blob.len() {
            return Err(GptError::Truncated {
                tensor: entry.name.clone(),
                expected: 4 * entry.len,
                got: blob.len().saturating_sub(entry.offset),
            });
        }
        let values: Vec<f64> = blob[entry.offset..end]
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        tensors.push(values);
        expected_offset = end;
    }
    if expected_offset != blob.len() {
        return Err(GptError::Header(format!("{} trailing bytes", blob.len() - expected_offset)));
    }
    let c = ModelCheckpoint {
        weights: Weights::from_tensors(&header.config, tensors)?,
        config: header.config,
        discretizer: header.discretizer,
        input_norm: header.input_norm,
        provenance: header.provenance,
    };
    c.validate()?;
    Ok(c)
}

/// Writes beside `path` and renames into place.
pub fn save(c: &ModelCheckpoint, path: impl AsRef<Path>) -> Result<(), GptError> {
    let path = path.as_ref();
    let io = |source| GptError::Io {
        path: path.to_path_buf(),
        source,
    };
    let mut tmp_name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    let mut f = fs::File::create(&tmp).map_err(io)?;
    f.write_all(&encode_checkpoint(c)).map_err(io)?;
    f.sync_all().map_err(io)?;
    drop(f);
    fs::rename(&tmp, path).map_err(io)
}

pub fn load(path: impl AsRef<Path>) -> Result<ModelCheckpoint, GptError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| GptError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    decode_checkpoint(&bytes)
}
