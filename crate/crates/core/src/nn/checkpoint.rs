//! Binary checkpoint format.
//!
//! ```text
//! "LUXMCKP1"                 8 bytes
//! manifest length            u64 little-endian
//! manifest                   UTF-8 JSON
//! tensor payloads            little-endian f32 or f64, in manifest order
//! ```

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 8] = b"LUXMCKP1";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    fn width(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Offset from the start of the payload section.
    pub offset: u64,
    pub decay: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub arch: String,
    pub dtype: Dtype,
    pub config: serde_json::Value,
    pub provenance: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Debug, Clone)]
pub struct Checkpoint {
    pub manifest: Manifest,
    pub params: ParamStore,
}

pub fn encode(
    arch: &str,
    config: serde_json::Value,
    provenance: serde_json::Value,
    store: &ParamStore,
    dtype: Dtype,
) -> Result<Vec<u8>> {
    let mut offset = 0u64;
    let mut tensors = Vec::with_capacity(store.len());
    for (_, p) in store.iter() {
        tensors.push(TensorEntry {
            name: p.name.clone(),
            shape: p.value.shape().to_vec(),
            offset,
            decay: p.decay,
        });
        offset += (p.value.len() * dtype.width()) as u64;
    }
    let manifest = Manifest {
        arch: arch.to_string(),
        dtype,
        config,
        provenance,
        tensors,
    };
    let json = serde_json::to_vec(&manifest).map_err(|e| Error::Config(e.to_string()))?;
    let mut out = Vec::with_capacity(16 + json.len() + offset as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    for (_, p) in store.iter() {
        for v in p.value.data() {
            match dtype {
                Dtype::F32 => out.extend_from_slice(&(*v as f32).to_le_bytes()),
                Dtype::F64 => out.extend_from_slice(&v.to_le_bytes()),
            }
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8], context: &str) -> Result<Checkpoint> {
    let fmt = |offset: usize, reason: String| Error::Format {
        context: context.to_string(),
        offset: offset as u64,
        reason,
    };
    if bytes.len() < 16 {
        return Err(fmt(bytes.len(), format!("file is {} bytes, header needs 16", bytes.len())));
    }
    if &bytes[..8] != MAGIC {
        return Err(fmt(0, "bad magic, expected LUXMCKP1".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = 16usize
        .checked_add(len)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| fmt(16, format!("manifest of {len} bytes runs past end of file ({} bytes)", bytes.len())))?;
    let manifest: Manifest =
        serde_json::from_slice(&bytes[16..body]).map_err(|e| fmt(16, format!("invalid manifest: {e}")))?;
    let width = manifest.dtype.width();
    let mut params = ParamStore::new();
    for t in &manifest.tensors {
        let n: usize = t.shape.iter().product();
        let start = body + t.offset as usize;
        let end = start + n * width;
        if end > bytes.len() {
            return Err(fmt(
                bytes.len(),
                format!("tensor '{}' needs {} more bytes", t.name, end - bytes.len()),
            ));
        }
        let data: Vec<f64> = bytes[start..end]
            .chunks_exact(width)
            .map(|c| match manifest.dtype {
                Dtype::F32 => f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64,
                Dtype::F64 => f64::from_le_bytes(c.try_into().expect("8 bytes")),
            })
            .collect();
        let tensor = Tensor::new(t.shape.clone(), data)?;
        if !tensor.all_finite() {
            return Err(fmt(start, format!("tensor '{}' holds non-finite values", t.name)));
        }
        params.add(t.name.clone(), tensor, t.decay)?;
    }
    Ok(Checkpoint { manifest, params })
}

pub fn save(
    path: &Path,
    arch: &str,
    config: serde_json::Value,
    provenance: serde_json::Value,
    store: &ParamStore,
    dtype: Dtype,
) -> Result<()> {
    let bytes = encode(arch, config, provenance, store, dtype)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, &path.display().to_string())
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a", Tensor::new(vec![2, 3], vec![0.1, -2.5, 3.25, 1e-7, 0.0, 9.0]).unwrap(), true)
            .unwrap();
        s.add("b", Tensor::new(vec![3], vec![1.0 / 3.0, 2.0, -0.75]).unwrap(), false)
            .unwrap();
        s
    }

    #[test]
    fn f64_round_trip_is_exact() {
        let s = store();
        let bytes = encode("acu-net", json!({"m": 100}), json!({}), &s, Dtype::F64).unwrap();
        let ck = decode(&bytes, "mem").unwrap();
        assert_eq!(ck.manifest.arch, "acu-net");
        assert_eq!(ck.params.checksum(), s.checksum());
    }

    #[test]
    fn f32_round_trip_is_bit_exact_on_reencode() {
        let s = store();
        let bytes = encode("acu-sa-hu", json!(null), json!(null), &s, Dtype::F32).unwrap();
        let ck = decode(&bytes, "mem").unwrap();
        let again = encode("acu-sa-hu", json!(null), json!(null), &ck.params, Dtype::F32).unwrap();
        assert_eq!(bytes, again);
        assert_eq!(ck.params.value(ck.params.find("b").unwrap()).data()[0], (1.0f32 / 3.0) as f64);
    }

    #[test]
    fn corrupt_files_are_format_errors() {
        let s = store();
        let bytes = encode("acu-net", json!({}), json!({}), &s, Dtype::F64).unwrap();
        assert!(matches!(decode(&bytes[..10], "t"), Err(Error::Format { .. })));
        assert!(matches!(decode(&bytes[..bytes.len() - 3], "t"), Err(Error::Format { .. })));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode(&bad, "t"), Err(Error::Format { offset: 0, .. })));
    }
}
