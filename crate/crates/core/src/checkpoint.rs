//! Checkpoint directories: `manifest.json` next to `params.bin`.
//!
//! `params.bin` is a flat run of little-endian `f64` values. Every parameter
//! tensor of the store is written in registration order, followed by the
//! optimizer's first and then second moments in the same order when an
//! optimizer is saved. The manifest records offsets (in values, not bytes),
//! shapes, the blob length and its SHA-256.

use crate::error::{Error, Result};
use crate::nn::{Adam, LayerSpec, ParamKind, ParamSlot, ParamStore};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

pub const FORMAT: &str = "stereovae-checkpoint";
pub const VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub kind: ParamKind,
    pub slot: ParamSlot,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerEntry {
    pub step: u64,
    pub skipped: u64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m_offset: usize,
    pub v_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub format: String,
    pub version: u32,
    pub model: String,
    pub curvature: f64,
    pub config: serde_json::Value,
    pub layers: BTreeMap<String, Vec<LayerSpec>>,
    pub params: Vec<ParamEntry>,
    pub optimizer: Option<OptimizerEntry>,
    pub state: serde_json::Value,
    pub metrics: serde_json::Value,
    /// Number of `f64` values in `params.bin`.
    pub blob_len: usize,
    pub blob_sha256: String,
}

/// Serialises the store (and optionally the optimizer moments) into a blob
/// and the matching manifest fields.
pub fn pack(store: &ParamStore, optimizer: Option<&Adam>) -> (Vec<ParamEntry>, Option<OptimizerEntry>, Vec<f64>) {
    let mut blob = Vec::with_capacity(store.numel() * if optimizer.is_some() { 3 } else { 1 });
    let mut entries = Vec::with_capacity(store.len());
    for p in store.iter() {
        entries.push(ParamEntry {
            name: p.name.clone(),
            shape: p.shape.clone(),
            kind: p.kind,
            slot: p.slot,
            offset: blob.len(),
            len: p.value.len(),
        });
        blob.extend_from_slice(&p.value);
    }
    let opt = optimizer.map(|o| {
        let (m, v) = o.moments();
        let m_offset = blob.len();
        m.iter().for_each(|x| blob.extend_from_slice(x));
        let v_offset = blob.len();
        v.iter().for_each(|x| blob.extend_from_slice(x));
        OptimizerEntry {
            step: o.step_count(),
            skipped: o.skipped(),
            lr: o.config.lr,
            beta1: o.config.beta1,
            beta2: o.config.beta2,
            eps: o.config.eps,
            m_offset,
            v_offset,
        }
    });
    (entries, opt, blob)
}

/// Copies blob values back into a store with the same layout.
pub fn unpack_store(store: &mut ParamStore, entries: &[ParamEntry], blob: &[f64]) -> Result<()> {
    if entries.len() != store.len() {
        return Err(Error::Shape(format!(
            "checkpoint has {} tensors, model has {}",
            entries.len(),
            store.len()
        )));
    }
    for (e, p) in entries.iter().zip(store.iter_mut()) {
        if e.name != p.name || e.shape != p.shape || e.kind != p.kind {
            return Err(Error::Shape(format!(
                "checkpoint tensor {} {:?} does not match model tensor {} {:?}",
                e.name, e.shape, p.name, p.shape
            )));
        }
        let src = blob.get(e.offset..e.offset + e.len).ok_or_else(|| {
            Error::Shape(format!("tensor {} runs past the end of the blob", e.name))
        })?;
        p.value.copy_from_slice(src);
    }
    Ok(())
}

/// Restores optimizer moments written by [`pack`].
pub fn unpack_optimizer(opt: &mut Adam, entry: &OptimizerEntry, params: &[ParamEntry], blob: &[f64]) -> Result<()> {
    let read = |base: usize| -> Result<Vec<Vec<f64>>> {
        params
            .iter()
            .map(|e| {
                let start = base + e.offset;
                blob.get(start..start + e.len)
                    .map(<[f64]>::to_vec)
                    .ok_or_else(|| Error::Shape("optimizer state runs past the end of the blob".into()))
            })
            .collect()
    };
    let m = read(entry.m_offset)?;
    let v = read(entry.v_offset)?;
    opt.restore(entry.step, entry.skipped, m, v)
}

pub fn blob_bytes(blob: &[f64]) -> Vec<u8> {
    blob.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `manifest.json` and `params.bin`, filling in the blob length and
/// hash.
pub fn save(dir: &Path, mut manifest: Manifest, blob: &[f64]) -> Result<Manifest> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let bytes = blob_bytes(blob);
    manifest.format = FORMAT.to_string();
    manifest.version = VERSION;
    manifest.blob_len = blob.len();
    manifest.blob_sha256 = sha256_hex(&bytes);
    let params_path = dir.join(PARAMS_FILE);
    fs::write(&params_path, &bytes).map_err(|e| Error::io(&params_path, e))?;
    let manifest_path = dir.join(MANIFEST_FILE);
    let mut text = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::State(format!("manifest serialisation: {e}")))?;
    text.push('\n');
    fs::write(&manifest_path, text).map_err(|e| Error::io(&manifest_path, e))?;
    Ok(manifest)
}

/// Reads a checkpoint directory, verifying the blob length and hash.
pub fn load(dir: &Path) -> Result<(Manifest, Vec<f64>)> {
    let manifest_path = dir.join(MANIFEST_FILE);
    let text = fs::read_to_string(&manifest_path).map_err(|e| Error::io(&manifest_path, e))?;
    let manifest: Manifest = serde_json::from_str(&text).map_err(|e| Error::Ingest {
        path: manifest_path.display().to_string(),
        reason: e.to_string(),
    })?;
    if manifest.format != FORMAT || manifest.version != VERSION {
        return Err(Error::Ingest {
            path: manifest_path.display().to_string(),
            reason: format!("unsupported format {} v{}", manifest.format, manifest.version),
        });
    }
    let params_path = dir.join(PARAMS_FILE);
    let bytes = fs::read(&params_path).map_err(|e| Error::io(&params_path, e))?;
    if bytes.len() != manifest.blob_len * 8 {
        return Err(Error::Ingest {
            path: params_path.display().to_string(),
            reason: format!("expected {} bytes, found {}", manifest.blob_len * 8, bytes.len()),
        });
    }
    if sha256_hex(&bytes) != manifest.blob_sha256 {
        return Err(Error::Ingest {
            path: params_path.display().to_string(),
            reason: "sha256 does not match the manifest".into(),
        });
    }
    let blob = bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Ok((manifest, blob))
}
