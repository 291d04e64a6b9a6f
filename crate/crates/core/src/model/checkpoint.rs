//! Single-file checkpoint: magic, JSON header, then raw little-endian tensors.
//!
//! ```text
//! b"DATTTCKP" | u64 header length | header JSON | tensor payload
//! ```
//!
//! The header records the format version, model config, seed, the
//! component -> parameter-name partition, and one entry per tensor with its
//! byte offset into the payload.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::state::{Component, ModelConfig, ModelState};
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"DATTTCKP";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Role {
    Param,
    Buffer,
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    component: Component,
    role: Role,
    offset: u64,
    len: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    format_version: u32,
    dtype: String,
    config: ModelConfig,
    seed: u64,
    partition: BTreeMap<Component, Vec<String>>,
    tensors: Vec<TensorEntry>,
}

pub fn to_bytes(state: &ModelState) -> Vec<u8> {
    let mut tensors = Vec::new();
    let mut payload = Vec::with_capacity(state.num_params() * 8);
    let named = state
        .params
        .iter()
        .map(|p| (&p.name, p.component, Role::Param, &p.data))
        .chain(state.buffers.iter().map(|b| (&b.name, b.component, Role::Buffer, &b.data)));
    for (name, component, role, data) in named {
        tensors.push(TensorEntry {
            name: name.clone(),
            component,
            role,
            offset: payload.len() as u64,
            len: data.len() as u64,
        });
        for v in data {
            payload.extend_from_slice(&v.to_le_bytes());
        }
    }
    let header = Header {
        format_version: FORMAT_VERSION,
        dtype: "f64".into(),
        config: state.config,
        seed: state.seed,
        partition: state.partition(),
        tensors,
    };
    let json = serde_json::to_vec(&header).expect("header serializes");
    let mut out = Vec::with_capacity(16 + json.len() + payload.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&payload);
    out
}

pub fn from_bytes(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<ModelState> {
    let bad = |m: &str| Error::Checkpoint(m.to_string());
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("not a checkpoint file"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes.get(16..16 + hlen).ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body).map_err(|e| Error::Checkpoint(format!("header: {e}")))?;
    if header.format_version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {} is not supported (expected {FORMAT_VERSION})",
            header.format_version
        )));
    }
    if header.dtype != "f64" {
        return Err(Error::Checkpoint(format!("unsupported dtype `{}`", header.dtype)));
    }
    if let Some(cfg) = expected {
        if *cfg != header.config {
            return Err(Error::Checkpoint(format!(
                "config mismatch: checkpoint has {:?}, expected {:?}",
                header.config, cfg
            )));
        }
    }
    let payload = &bytes[16 + hlen..];
    let mut params = BTreeMap::new();
    let mut buffers = BTreeMap::new();
    for t in &header.tensors {
        let start = t.offset as usize;
        let end = start + 8 * t.len as usize;
        let raw = payload.get(start..end).ok_or_else(|| Error::Checkpoint(format!("tensor `{}` is truncated", t.name)))?;
        let data: Vec<f64> = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let target = if t.role == Role::Param { &mut params } else { &mut buffers };
        if target.insert(t.name.clone(), (t.component, data)).is_some() {
            return Err(Error::Checkpoint(format!("duplicate tensor `{}`", t.name)));
        }
    }
    let state = ModelState::from_parts(header.config, header.seed, params, buffers)?;
    if state.partition() != header.partition {
        return Err(bad("stored partition disagrees with the parameter tags"));
    }
    Ok(state)
}

pub fn save_checkpoint(state: &ModelState, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&to_bytes(state)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, None)
}

/// Loads and checks that the stored config equals `expected`.
pub fn load_checkpoint_for(path: &Path, expected: &ModelConfig) -> Result<ModelState> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes, Some(expected))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::state::init_model;

    #[test]
    fn round_trip_is_bit_identical() {
        let mut s = init_model(&ModelConfig::default(), 9).unwrap();
        s.buffers[0].data[0] = 0.1 + 0.2;
        let back = from_bytes(&to_bytes(&s), None).unwrap();
        assert_eq!(back, s);
        assert_eq!(back.partition(), s.partition());
    }

    #[test]
    fn config_mismatch_is_reported() {
        let s = init_model(&ModelConfig::default(), 9).unwrap();
        let other = ModelConfig { base_width: 8, ..Default::default() };
        let err = from_bytes(&to_bytes(&s), Some(&other)).unwrap_err();
        assert!(err.to_string().contains("config mismatch"));
    }

    #[test]
    fn version_mismatch_is_reported() {
        let s = init_model(&ModelConfig { base_width: 4, decoder_width: 4, ..Default::default() }, 1).unwrap();
        let mut bytes = to_bytes(&s);
        let key = b"\"format_version\":1";
        let at = bytes.windows(key.len()).position(|w| w == key).unwrap();
        bytes[at + key.len() - 1] = b'7';
        let err = from_bytes(&bytes, None).unwrap_err();
        assert!(err.to_string().contains("format version 7"));
        assert!(from_bytes(b"garbage", None).is_err());
    }
}
