//! Flat binary parameter container.
//!
//! Layout:
//!
//! ```text
//! magic   8 bytes   b"DVLCKPT1"
//! hlen    u64 LE    length of the JSON header in bytes
//! header  hlen      {"records":[{"name","shape","offset","len"}...],"meta":{...}}
//! payload           every record's values as little-endian f64, in header order
//! ```
//!
//! `offset` and `len` count f64 values from the start of the payload.

use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::io::{Read, Write};
use std::path::Path;

const MAGIC: &[u8; 8] = b"DVLCKPT1";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RecordHeader {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct Header {
    records: Vec<RecordHeader>,
    #[serde(default)]
    meta: serde_json::Value,
}

/// Decoded checkpoint.
#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub records: Vec<(String, Tensor)>,
    pub meta: serde_json::Value,
}

pub fn encode(store: &ParamStore, meta: &serde_json::Value) -> Result<Vec<u8>> {
    let mut offset = 0;
    let records: Vec<RecordHeader> = store
        .iter()
        .map(|p| {
            let len = p.value().numel();
            let r = RecordHeader {
                name: p.name.clone(),
                shape: p.value().shape().to_vec(),
                offset,
                len,
            };
            offset += len;
            r
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        records,
        meta: meta.clone(),
    })?;
    let mut out = Vec::with_capacity(16 + header.len() + offset * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u64).to_le_bytes());
    out.extend_from_slice(&header);
    for p in store.iter() {
        for v in p.value().data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let bad = |msg: &str| Error::validation(format!("checkpoint: {msg}"));
    if bytes.len() < 16 || &bytes[..8] != MAGIC {
        return Err(bad("missing magic"));
    }
    let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
    let body = bytes
        .get(16..16 + hlen)
        .ok_or_else(|| bad("truncated header"))?;
    let header: Header = serde_json::from_slice(body)?;
    let payload = &bytes[16 + hlen..];
    let mut records = Vec::with_capacity(header.records.len());
    for r in header.records {
        let expect: usize = r.shape.iter().product();
        if expect != r.len {
            return Err(bad(&format!(
                "record {} has shape {:?} but length {}",
                r.name, r.shape, r.len
            )));
        }
        let raw = payload
            .get(r.offset * 8..(r.offset + r.len) * 8)
            .ok_or_else(|| bad(&format!("record {} runs past the payload", r.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        records.push((r.name, Tensor::new(r.shape, data)?));
    }
    Ok(Checkpoint {
        records,
        meta: header.meta,
    })
}

pub fn save(path: &Path, store: &ParamStore, meta: &serde_json::Value) -> Result<()> {
    let bytes = encode(store, meta)?;
    let mut f = std::fs::File::create(path)?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode(&bytes)
}

impl Checkpoint {
    /// Copies every record into `store`, requiring names and shapes to match exactly.
    pub fn restore_into(&self, store: &mut ParamStore) -> Result<()> {
        if self.records.len() != store.len() {
            return Err(Error::validation(format!(
                "checkpoint has {} records, model has {} parameters",
                self.records.len(),
                store.len()
            )));
        }
        for (name, t) in &self.records {
            let id = store
                .find(name)
                .ok_or_else(|| Error::validation(format!("unknown parameter {name}")))?;
            if store.get(id).shape() != t.shape() {
                return Err(Error::dim("checkpoint restore", store.get(id).shape(), t.shape()));
            }
            *store.value_mut(id) = t.clone();
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a.weight", Tensor::new(vec![2, 2], vec![1.0, -2.5, 3.0, 1e-300]).unwrap())
            .unwrap();
        s.add("a.bias", Tensor::vector(vec![0.125])).unwrap();
        s
    }

    #[test]
    fn encode_decode_restores_bits() {
        let s = store();
        let meta = serde_json::json!({"k": 1});
        let ck = decode(&encode(&s, &meta).unwrap()).unwrap();
        assert_eq!(ck.meta, meta);
        let mut fresh = store();
        *fresh.value_mut(fresh.find("a.bias").unwrap()) = Tensor::vector(vec![9.0]);
        ck.restore_into(&mut fresh).unwrap();
        assert_eq!(fresh.fingerprint(), s.fingerprint());
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let s = store();
        let ck = decode(&encode(&s, &serde_json::Value::Null).unwrap()).unwrap();
        let mut other = ParamStore::new();
        other.add("a.weight", Tensor::zeros(&[4])).unwrap();
        other.add("a.bias", Tensor::zeros(&[1])).unwrap();
        assert!(ck.restore_into(&mut other).is_err());
    }

    #[test]
    fn truncated_payload_is_rejected() {
        let bytes = encode(&store(), &serde_json::Value::Null).unwrap();
        assert!(decode(&bytes[..bytes.len() - 4]).is_err());
        assert!(decode(b"nonsense").is_err());
    }
}
