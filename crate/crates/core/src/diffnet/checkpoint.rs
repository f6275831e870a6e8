//! Binary checkpoint codec.
//!
//! Layout: 8-byte magic `BUCKPT01`, u64 LE header length, JSON header,
//! then every tensor's values as little-endian f64 in manifest order.
//! The header carries a SHA-256 of the payload so truncation and bit rot
//! are detected before any tensor is materialised.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ParamStore, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"BUCKPT01";
pub const CHECKPOINT_SCHEMA: &str = "beliefunc.checkpoint/1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub count: usize,
}

/// What the weights are for. `fingerprint` ties a checkpoint to the world
/// it was trained against; `mode` to its output parameterisation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub mode: String,
    pub fingerprint: String,
    #[serde(default)]
    pub extra: serde_json::Value,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct Header {
    schema: String,
    meta: CheckpointMeta,
    step: u64,
    payload_sha256: String,
    tensors: Vec<TensorEntry>,
}

pub fn encode_checkpoint(params: &ParamStore, meta: &CheckpointMeta) -> Result<Vec<u8>> {
    let mut payload = Vec::with_capacity(params.num_scalars() * 8);
    let mut tensors = Vec::with_capacity(params.len());
    for (name, t) in params.iter() {
        tensors.push(TensorEntry {
            name: name.to_string(),
            rows: t.rows(),
            cols: t.cols(),
            count: t.len(),
        });
        for v in t.data() {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        schema: CHECKPOINT_SCHEMA.to_string(),
        meta: meta.clone(),
        step: params.step(),
        payload_sha256: hex_digest(&payload),
        tensors,
    };
    let header_bytes = serde_json::to_vec(&header)?;
    let mut out = Vec::with_capacity(16 + header_bytes.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_bytes);
    out.extend_from_slice(&payload);
    Ok(out)
}

fn hex_digest(bytes: &[u8]) -> String {
    Sha256::digest(bytes)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

/// Decodes bytes read from `path` (used only for error messages).
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(ParamStore, CheckpointMeta)> {
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(Error::Format(format!(
            "{} is not a checkpoint",
            path.display()
        )));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let header_end = 16usize
        .checked_add(hlen)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Checksum(path.to_path_buf()))?;
    let header: Header = serde_json::from_slice(&bytes[16..header_end])?;
    if header.schema != CHECKPOINT_SCHEMA {
        return Err(Error::Format(format!(
            "unsupported schema `{}`",
            header.schema
        )));
    }
    let payload = &bytes[header_end..];
    if hex_digest(payload) != header.payload_sha256 {
        return Err(Error::Checksum(path.to_path_buf()));
    }
    let expected: usize = header.tensors.iter().map(|t| t.count * 8).sum();
    if expected != payload.len() {
        return Err(Error::Format(format!(
            "manifest describes {expected} payload bytes, found {}",
            payload.len()
        )));
    }
    let mut params = ParamStore::new();
    let mut offset = 0;
    for entry in &header.tensors {
        if entry.rows * entry.cols != entry.count {
            return Err(Error::Format(format!(
                "tensor `{}` count disagrees with shape",
                entry.name
            )));
        }
        let data = payload[offset..offset + entry.count * 8]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        offset += entry.count * 8;
        params.add(
            entry.name.clone(),
            Tensor::from_vec(entry.rows, entry.cols, data)?,
        )?;
    }
    params.set_step(header.step);
    Ok((params, header.meta))
}

/// Writes atomically: the bytes go to a sibling temp file which is then
/// renamed over the target.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension(format!(
        "{}.tmp",
        path.extension().and_then(|e| e.to_str()).unwrap_or("")
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn save_checkpoint(path: &Path, params: &ParamStore, meta: &CheckpointMeta) -> Result<()> {
    write_atomic(path, &encode_checkpoint(params, meta)?)
}

/// Loads a checkpoint, optionally insisting on a fingerprint and mode.
pub fn load_checkpoint(
    path: &Path,
    expect_fingerprint: Option<&str>,
    expect_mode: Option<&str>,
) -> Result<(ParamStore, CheckpointMeta)> {
    let bytes = fs::read(path).map_err(|e| {
        if e.kind() == std::io::ErrorKind::NotFound {
            Error::MissingArtifact {
                what: "checkpoint".into(),
                path: path.to_path_buf(),
            }
        } else {
            Error::io(path, e)
        }
    })?;
    let (params, meta) = decode_checkpoint(&bytes, path)?;
    if let Some(fp) = expect_fingerprint {
        if meta.fingerprint != fp {
            return Err(Error::Fingerprint {
                expected: fp.to_string(),
                found: meta.fingerprint.clone(),
            });
        }
    }
    if let Some(mode) = expect_mode {
        if meta.mode != mode {
            return Err(Error::Fingerprint {
                expected: format!("mode {mode}"),
                found: format!("mode {}", meta.mode),
            });
        }
    }
    Ok((params, meta))
}
