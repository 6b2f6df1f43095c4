//! Named tensor bundles for checkpoints.
//!
//! Layout: `"GXBN"`, u32 LE version (1), u64 LE index length, a JSON index,
//! then the concatenated GXB1 blobs. Index offsets are relative to the first
//! byte after the index.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::tape::ParamSet;
use super::tensor::{decode_gxb1, encode_gxb1};
use crate::error::{Error, Result};

pub const BUNDLE_MAGIC: &[u8; 4] = b"GXBN";

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BundleEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: u64,
    pub length: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
pub struct BundleIndex {
    /// Free-form metadata, e.g. backbone kind and its config.
    pub meta: serde_json::Value,
    pub tensors: Vec<BundleEntry>,
}

pub fn encode_bundle(params: &ParamSet, meta: serde_json::Value) -> Result<Vec<u8>> {
    let mut blobs = Vec::new();
    let mut tensors = Vec::new();
    for (name, t) in params.iter() {
        let blob = encode_gxb1(t);
        tensors.push(BundleEntry {
            name: name.clone(),
            shape: t.shape().to_vec(),
            offset: blobs.len() as u64,
            length: blob.len() as u64,
        });
        blobs.extend_from_slice(&blob);
    }
    let index = serde_json::to_vec(&BundleIndex { meta, tensors })?;
    let mut out = Vec::with_capacity(16 + index.len() + blobs.len());
    out.extend_from_slice(BUNDLE_MAGIC);
    out.extend_from_slice(&1u32.to_le_bytes());
    out.extend_from_slice(&(index.len() as u64).to_le_bytes());
    out.extend_from_slice(&index);
    out.extend_from_slice(&blobs);
    Ok(out)
}

pub fn decode_bundle(bytes: &[u8]) -> Result<(ParamSet, serde_json::Value)> {
    if bytes.len() < 16 || &bytes[..4] != BUNDLE_MAGIC {
        return Err(Error::Format("not a GXBN bundle".into()));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != 1 {
        return Err(Error::Format(format!("unsupported bundle version {version}")));
    }
    let ilen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let data_start = 16 + ilen;
    if bytes.len() < data_start {
        return Err(Error::Format("truncated bundle index".into()));
    }
    let index: BundleIndex = serde_json::from_slice(&bytes[16..data_start])?;
    let data = &bytes[data_start..];
    let mut params = ParamSet::new();
    for e in &index.tensors {
        let (o, l) = (e.offset as usize, e.length as usize);
        let blob = data
            .get(o..o + l)
            .ok_or_else(|| Error::Format(format!("tensor `{}` out of bounds", e.name)))?;
        let t = decode_gxb1(blob)?;
        if t.shape() != e.shape.as_slice() {
            return Err(Error::Format(format!("index shape mismatch for `{}`", e.name)));
        }
        params.insert(e.name.clone(), t);
    }
    Ok((params, index.meta))
}

pub fn save_bundle(path: &Path, params: &ParamSet, meta: serde_json::Value) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, encode_bundle(params, meta)?)?;
    Ok(())
}

pub fn load_bundle(path: &Path) -> Result<(ParamSet, serde_json::Value)> {
    decode_bundle(&fs::read(path)?)
}
