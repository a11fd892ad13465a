//! Checkpoint container: a JSON header followed by raw little-endian f32
//! tensor data.
//!
//! ```text
//! [ b"LOCG" ][ u32 LE header length ][ header JSON ][ payload f32 LE ... ]
//! ```
//!
//! The header carries the format version, the model config, the tensor
//! table (name, shape, byte offset into the payload), and an arbitrary JSON
//! `meta` blob the training commands use to echo their run settings.
//! Serialization is fully deterministic, so save → load → save reproduces
//! the file byte for byte — which is what makes repeated runs comparable by
//! hash alone.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::autodiff::TensorData;
use crate::dataio::atomic_write;
use crate::error::{Error, Result};

use super::{tensor_layout, ModelConfig, ModelParams};

const MAGIC: &[u8; 4] = b"LOCG";
const FORMAT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    shape: Vec<usize>,
    /// Byte offset of this tensor's data within the payload.
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format_version: u32,
    config: ModelConfig,
    tensors: Vec<TensorMeta>,
    meta: Value,
}

/// Writes a checkpoint atomically.
pub fn save_checkpoint(path: &Path, params: &ModelParams, meta: &Value) -> Result<()> {
    let layout = tensor_layout(params.config());
    let mut tensors = Vec::with_capacity(layout.len());
    let mut offset = 0u64;
    for ((name, _), tensor) in layout.iter().zip(params.tensors()) {
        tensors.push(TensorMeta { name: name.clone(), shape: tensor.shape().to_vec(), offset });
        offset += tensor.numel() as u64 * 4;
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        config: params.config().clone(),
        tensors,
        meta: meta.clone(),
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let header_len = u32::try_from(header_bytes.len())
        .map_err(|_| Error::InvalidArgument("checkpoint header too large".into()))?;

    let mut out = Vec::with_capacity(8 + header_bytes.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&header_len.to_le_bytes());
    out.extend_from_slice(&header_bytes);
    for tensor in params.tensors() {
        for &v in tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    atomic_write(path, &out)
}

/// Reads a checkpoint back, validating structure against the embedded
/// config's tensor layout.
pub fn load_checkpoint(path: &Path) -> Result<(ModelParams, Value)> {
    let bytes = fs::read(path)?;
    let fail = |detail: &str| Error::Parse(format!("{}: {detail}", path.display()));
    if bytes.len() < 8 || &bytes[0..4] != MAGIC {
        return Err(fail("not a checkpoint file (bad magic)"));
    }
    let header_len = u32::from_le_bytes(bytes[4..8].try_into().unwrap()) as usize;
    let payload_start = 8 + header_len;
    if bytes.len() < payload_start {
        return Err(fail("truncated header"));
    }
    let header: Header = serde_json::from_slice(&bytes[8..payload_start])
        .map_err(|e| fail(&format!("bad header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(fail(&format!(
            "format version {} unsupported (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    let layout = tensor_layout(&header.config);
    if layout.len() != header.tensors.len() {
        return Err(fail(&format!(
            "{} tensors in header, layout needs {}",
            header.tensors.len(),
            layout.len()
        )));
    }
    let payload = &bytes[payload_start..];
    let mut tensors = Vec::with_capacity(layout.len());
    let mut expect_offset = 0u64;
    for ((name, _), meta) in layout.iter().zip(&header.tensors) {
        if &meta.name != name {
            return Err(fail(&format!("tensor {} out of order (expected {name})", meta.name)));
        }
        if meta.offset != expect_offset {
            return Err(fail(&format!("tensor {name} at offset {}, expected {expect_offset}", meta.offset)));
        }
        let numel: usize = meta.shape.iter().product();
        let start = meta.offset as usize;
        let end = start + numel * 4;
        if payload.len() < end {
            return Err(fail(&format!("payload truncated in tensor {name}")));
        }
        let data: Vec<f32> = payload[start..end]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(TensorData::new(data, &meta.shape)?);
        expect_offset = end as u64;
    }
    if payload.len() as u64 != expect_offset {
        return Err(fail("trailing bytes after last tensor"));
    }
    let params = ModelParams::from_tensors(header.config, tensors)?;
    Ok((params, header.meta))
}

/// FNV-1a hash over the config and every weight byte. Two models hash
/// equal iff their configs and weights are bit-identical.
pub fn params_hash(params: &ModelParams) -> u64 {
    const BASIS: u64 = 0xcbf2_9ce4_8422_2325;
    const PRIME: u64 = 0x0000_0100_0000_01b3;
    let mut h = BASIS;
    let mut eat = |bytes: &[u8]| {
        for &b in bytes {
            h ^= u64::from(b);
            h = h.wrapping_mul(PRIME);
        }
    };
    eat(&serde_json::to_vec(params.config()).expect("config serializes"));
    for tensor in params.tensors() {
        for &v in tensor.data() {
            eat(&v.to_le_bytes());
        }
    }
    h
}
