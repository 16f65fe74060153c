//! Weight file: magic, format version, JSON architecture descriptor, then raw
//! little-endian f64 weights in registry order.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Arch, DenoiserModel};
use crate::error::{NemoError, Result};

pub const MAGIC: &[u8; 8] = b"NEMOTOY\0";
pub const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Descriptor {
    arch: Arch,
    value_layers: Vec<String>,
    tensors: Vec<TensorEntry>,
}

pub fn to_bytes(model: &DenoiserModel) -> Vec<u8> {
    let desc = Descriptor {
        arch: model.arch.clone(),
        value_layers: (0..model.arch.n_layers()).map(|l| format!("blocks.{l}.attn.wv")).collect(),
        tensors: model
            .layout
            .specs
            .iter()
            .map(|s| TensorEntry { name: s.name.clone(), shape: s.shape.clone() })
            .collect(),
    };
    let json = serde_json::to_vec(&desc).expect("descriptor serializes");
    let mut out = Vec::with_capacity(24 + json.len() + 8 * model.params.len());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(&(model.params.len() as u64).to_le_bytes());
    for p in &model.params {
        out.extend_from_slice(&p.to_le_bytes());
    }
    out
}

fn take<'a>(buf: &mut &'a [u8], n: usize, what: &str) -> Result<&'a [u8]> {
    if buf.len() < n {
        return Err(NemoError::Corrupt(format!("truncated while reading {what}")));
    }
    let (head, tail) = buf.split_at(n);
    *buf = tail;
    Ok(head)
}

pub fn from_bytes(bytes: &[u8]) -> Result<DenoiserModel> {
    let mut buf = bytes;
    if take(&mut buf, 8, "magic")? != MAGIC {
        return Err(NemoError::Corrupt("bad magic bytes".into()));
    }
    let version = u32::from_le_bytes(take(&mut buf, 4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(NemoError::Version { found: version, expected: VERSION });
    }
    let len = u32::from_le_bytes(take(&mut buf, 4, "descriptor length")?.try_into().unwrap()) as usize;
    let desc: Descriptor = serde_json::from_slice(take(&mut buf, len, "descriptor")?)
        .map_err(|e| NemoError::Corrupt(format!("descriptor: {e}")))?;
    let count = u64::from_le_bytes(take(&mut buf, 8, "weight count")?.try_into().unwrap()) as usize;
    let expected: usize = desc.tensors.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if count != expected {
        return Err(NemoError::Corrupt(format!("weight count {count} does not match descriptor ({expected})")));
    }
    let raw = take(&mut buf, count.checked_mul(8).ok_or_else(|| NemoError::Corrupt("size overflow".into()))?, "weights")?;
    if !buf.is_empty() {
        return Err(NemoError::Corrupt(format!("{} trailing bytes", buf.len())));
    }
    let params = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
    let model = DenoiserModel::from_params(desc.arch, params)
        .map_err(|e| NemoError::Corrupt(format!("descriptor/weights mismatch: {e}")))?;
    let same = model.layout.specs.len() == desc.tensors.len()
        && model.layout.specs.iter().zip(&desc.tensors).all(|(s, t)| s.name == t.name && s.shape == t.shape);
    if !same {
        return Err(NemoError::Corrupt("tensor registry does not match architecture".into()));
    }
    Ok(model)
}

pub fn save_model(model: &DenoiserModel, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&to_bytes(model))?;
    Ok(())
}

pub fn load_model(path: &Path) -> Result<DenoiserModel> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    from_bytes(&bytes)
}

/// Hex SHA-256 of the serialized model.
pub fn model_hash(model: &DenoiserModel) -> String {
    let digest = Sha256::digest(to_bytes(model));
    digest.iter().map(|b| format!("{b:02x}")).collect()
}
