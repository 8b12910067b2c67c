//! Single-file model container: a magic tag, a JSON header, then a
//! little-endian `f32` parameter block.
//!
//! Layout: `magic (4 bytes) | header length (u32 LE) | header JSON | f32 LE values`.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;

use crate::error::{LacoatError, Result};

pub(crate) fn write<H: Serialize>(path: &Path, magic: &[u8; 4], header: &H, values: &[f32]) -> Result<()> {
    let header = serde_json::to_vec(header).map_err(|e| LacoatError::json("model header", e))?;
    let mut bytes = Vec::with_capacity(8 + header.len() + values.len() * 4);
    bytes.extend_from_slice(magic);
    bytes.extend_from_slice(&(header.len() as u32).to_le_bytes());
    bytes.extend_from_slice(&header);
    for v in values {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| LacoatError::io(path, e))
}

pub(crate) fn read<H: DeserializeOwned>(path: &Path, magic: &[u8; 4]) -> Result<(H, Vec<f32>)> {
    if !path.is_file() {
        return Err(LacoatError::MissingFile(path.to_path_buf()));
    }
    let bytes = fs::read(path).map_err(|e| LacoatError::io(path, e))?;
    let bad = |why: &str| LacoatError::invalid(format!("{}: {why}", path.display()));
    if bytes.len() < 8 || &bytes[..4] != magic {
        return Err(bad("unrecognized model file"));
    }
    let header_len = u32::from_le_bytes([bytes[4], bytes[5], bytes[6], bytes[7]]) as usize;
    let body_start = 8 + header_len;
    if bytes.len() < body_start || !(bytes.len() - body_start).is_multiple_of(4) {
        return Err(bad("truncated model file"));
    }
    let header = serde_json::from_slice(&bytes[8..body_start])
        .map_err(|e| LacoatError::json(path.display().to_string(), e))?;
    let values: Vec<f32> = bytes[body_start..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if values.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite parameter"));
    }
    Ok((header, values))
}

/// Rounds through `f32` so in-memory parameters equal what a save/load yields.
pub(crate) fn round_f32(values: &mut [f64]) {
    values.iter_mut().for_each(|v| *v = *v as f32 as f64);
}
