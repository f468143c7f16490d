//! Single-file container: magic, format version, JSON header, raw
//! little-endian tensor data and a SHA-256 trailer over everything before it.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 6] = b"MSUI2I";
pub const CHECKPOINT_VERSION: u32 = 1;
const DIGEST_LEN: usize = 32;
const PREFIX_LEN: usize = 6 + 4 + 8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    dtype: String,
    shape: Vec<usize>,
    offset: usize,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

fn tensor_bytes(t: &Tensor) -> Result<(String, Vec<u8>)> {
    let flat = t.flatten_all()?;
    Ok(match t.dtype() {
        DType::F64 => (
            "f64".into(),
            flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
        ),
        _ => (
            "f32".into(),
            flat.to_dtype(DType::F32)?
                .to_vec1::<f32>()?
                .iter()
                .flat_map(|v| v.to_le_bytes())
                .collect(),
        ),
    })
}

/// Serialises to bytes; `tensors` are written in key order.
pub fn encode(meta: &serde_json::Value, tensors: &BTreeMap<String, Tensor>) -> Result<Vec<u8>> {
    let mut entries = Vec::with_capacity(tensors.len());
    let mut blob = Vec::new();
    for (name, t) in tensors {
        let (dtype, bytes) = tensor_bytes(t)?;
        entries.push(TensorEntry {
            name: name.clone(),
            dtype,
            shape: t.dims().to_vec(),
            offset: blob.len(),
            len: bytes.len(),
        });
        blob.extend(bytes);
    }
    let header = serde_json::to_vec(&Header {
        meta: meta.clone(),
        tensors: entries,
    })
    .map_err(|e| Error::Integrity(format!("header serialisation: {e}")))?;
    let mut out = Vec::with_capacity(PREFIX_LEN + header.len() + blob.len() + DIGEST_LEN);
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend(header);
    out.extend(blob);
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<(serde_json::Value, BTreeMap<String, Tensor>)> {
    if bytes.len() < PREFIX_LEN + DIGEST_LEN || &bytes[..6] != CHECKPOINT_MAGIC {
        return Err(Error::Integrity("not a checkpoint (bad magic or truncated)".into()));
    }
    let version = u32::from_le_bytes(bytes[6..10].try_into().expect("4 bytes"));
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let (body, digest) = bytes.split_at(bytes.len() - DIGEST_LEN);
    if Sha256::digest(body).as_slice() != digest {
        return Err(Error::Integrity("checksum mismatch".into()));
    }
    let header_len = u64::from_le_bytes(bytes[10..18].try_into().expect("8 bytes")) as usize;
    let header_end = PREFIX_LEN
        .checked_add(header_len)
        .filter(|&e| e <= body.len())
        .ok_or_else(|| Error::Integrity("header length out of range".into()))?;
    let header: Header = serde_json::from_slice(&body[PREFIX_LEN..header_end])
        .map_err(|e| Error::Integrity(format!("header: {e}")))?;
    let blob = &body[header_end..];
    let mut tensors = BTreeMap::new();
    for e in header.tensors {
        let end = e
            .offset
            .checked_add(e.len)
            .filter(|&end| end <= blob.len())
            .ok_or_else(|| Error::Integrity(format!("tensor `{}` out of range", e.name)))?;
        let raw = &blob[e.offset..end];
        let count: usize = e.shape.iter().product();
        let t = match e.dtype.as_str() {
            "f32" if raw.len() == 4 * count => {
                let v: Vec<f32> = raw
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                    .collect();
                Tensor::from_vec(v, e.shape.as_slice(), &Device::Cpu)?
            }
            "f64" if raw.len() == 8 * count => {
                let v: Vec<f64> = raw
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                    .collect();
                Tensor::from_vec(v, e.shape.as_slice(), &Device::Cpu)?
            }
            _ => return Err(Error::Integrity(format!("tensor `{}` has bad dtype or size", e.name))),
        };
        tensors.insert(e.name, t);
    }
    Ok((header.meta, tensors))
}

/// Atomic write: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let tmp = dir.join(format!(
        ".{}.tmp",
        path.file_name().and_then(|n| n.to_str()).unwrap_or("checkpoint")
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
        f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
        f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<(serde_json::Value, BTreeMap<String, Tensor>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// SHA-256 of a file, hex encoded.
pub fn file_sha256(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> (serde_json::Value, BTreeMap<String, Tensor>) {
        let mut t = BTreeMap::new();
        t.insert("a".to_string(), Tensor::new(&[[1.5f32, -2.0], [0.25, 3.0]], &Device::Cpu).unwrap());
        t.insert("b".to_string(), Tensor::new(&[1e-300f64, 7.0], &Device::Cpu).unwrap());
        (serde_json::json!({"step": 3, "name": "x"}), t)
    }

    #[test]
    fn round_trip_is_exact() {
        let (meta, t) = sample();
        let bytes = encode(&meta, &t).unwrap();
        let (meta2, t2) = decode(&bytes).unwrap();
        assert_eq!(meta, meta2);
        assert_eq!(encode(&meta2, &t2).unwrap(), bytes);
    }

    #[test]
    fn corruption_is_detected() {
        let (meta, t) = sample();
        let bytes = encode(&meta, &t).unwrap();
        for pos in [20, bytes.len() / 2, bytes.len() - 40, bytes.len() - 1] {
            let mut bad = bytes.clone();
            bad[pos] ^= 0x40;
            assert!(matches!(decode(&bad), Err(Error::Integrity(_))), "byte {pos}");
        }
        assert!(matches!(decode(&bytes[..bytes.len() - 3]), Err(Error::Integrity(_))));
    }

    #[test]
    fn version_is_checked_first() {
        let (meta, t) = sample();
        let mut bytes = encode(&meta, &t).unwrap();
        bytes[6..10].copy_from_slice(&2u32.to_le_bytes());
        assert!(matches!(
            decode(&bytes),
            Err(Error::UnsupportedVersion { found: 2, expected: 1 })
        ));
    }
}
