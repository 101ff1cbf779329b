//! Parameter checkpoints.
//!
//! The binary file is a sequence of records, one per parameter in store
//! order:
//!
//! ```text
//! u32 name_len | name (utf-8) | u8 dtype | u32 rank | u64 extent * rank | payload
//! ```
//!
//! All integers are little-endian; dtype `1` is little-endian `f64`. A JSON
//! manifest next to the binary lists the parameter order and shapes and may
//! carry the model configuration.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ParamStore, Tensor, TensorError};

pub const DTYPE_F64: u8 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub parameters: Vec<ManifestEntry>,
    #[serde(default)]
    pub config: serde_json::Value,
}

impl Manifest {
    pub fn of(store: &ParamStore, config: serde_json::Value) -> Self {
        Self {
            parameters: store
                .iter()
                .map(|p| ManifestEntry {
                    name: p.name.clone(),
                    shape: p.tensor.shape().to_vec(),
                })
                .collect(),
            config,
        }
    }
}

fn bad(msg: impl Into<String>) -> TensorError {
    TensorError::Checkpoint(msg.into())
}

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    for p in store.iter() {
        out.extend_from_slice(&(p.name.len() as u32).to_le_bytes());
        out.extend_from_slice(p.name.as_bytes());
        out.push(DTYPE_F64);
        out.extend_from_slice(&(p.tensor.rank() as u32).to_le_bytes());
        for &e in p.tensor.shape() {
            out.extend_from_slice(&(e as u64).to_le_bytes());
        }
        for v in p.tensor.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], TensorError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| bad(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, TensorError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64, TensorError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor)>, TensorError> {
    let mut r = Reader { bytes, pos: 0 };
    let mut out = Vec::new();
    while r.pos < bytes.len() {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| bad("parameter name is not utf-8"))?
            .to_string();
        let dtype = r.take(1)?[0];
        if dtype != DTYPE_F64 {
            return Err(bad(format!("{name}: unsupported dtype tag {dtype}")));
        }
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|e| e as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n = shape
            .iter()
            .try_fold(1usize, |a, &e| a.checked_mul(e))
            .ok_or_else(|| bad(format!("{name}: shape overflow")))?;
        let payload = r.take(n.checked_mul(8).ok_or_else(|| bad("payload overflow"))?)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}

/// Copies decoded records into a store built for the same architecture.
/// Every store parameter must be present with the same shape.
pub fn load_into(store: &mut ParamStore, records: Vec<(String, Tensor)>) -> Result<(), TensorError> {
    if records.len() != store.len() {
        return Err(bad(format!(
            "checkpoint has {} parameters, model has {}",
            records.len(),
            store.len()
        )));
    }
    for (name, t) in records {
        let id = store.id(&name)?;
        let p = store.get_mut(id);
        if p.tensor.shape() != t.shape() {
            return Err(bad(format!(
                "{name}: shape {:?} in checkpoint, {:?} in model",
                t.shape(),
                p.tensor.shape()
            )));
        }
        p.tensor = t;
    }
    Ok(())
}

pub fn manifest_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

/// Writes `path` and `path.json`.
pub fn save(store: &ParamStore, config: serde_json::Value, path: &Path) -> Result<(), TensorError> {
    std::fs::write(path, encode(store))?;
    let manifest = serde_json::to_string_pretty(&Manifest::of(store, config))
        .map_err(|e| bad(e.to_string()))?;
    std::fs::write(manifest_path(path), manifest)?;
    Ok(())
}

pub fn read_manifest(path: &Path) -> Result<Manifest, TensorError> {
    let text = std::fs::read_to_string(manifest_path(path))?;
    serde_json::from_str(&text).map_err(|e| bad(e.to_string()))
}

pub fn load(store: &mut ParamStore, path: &Path) -> Result<(), TensorError> {
    let bytes = std::fs::read(path)?;
    load_into(store, decode(&bytes)?)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        s.add("a.w", Tensor::new([2, 3], (0..6).map(|i| i as f64 * 0.1).collect()).unwrap())
            .unwrap();
        s.add("b", Tensor::scalar(-1.5e-300)).unwrap();
        s
    }

    #[test]
    fn header_layout() {
        let bytes = encode(&store());
        assert_eq!(&bytes[..4], &3u32.to_le_bytes());
        assert_eq!(&bytes[4..7], b"a.w");
        assert_eq!(bytes[7], DTYPE_F64);
        assert_eq!(&bytes[8..12], &2u32.to_le_bytes());
        assert_eq!(&bytes[12..20], &2u64.to_le_bytes());
        assert_eq!(&bytes[20..28], &3u64.to_le_bytes());
        assert_eq!(bytes.len(), 28 + 48 + 4 + 1 + 1 + 4 + 8 + 8);
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = store();
        let mut other = store();
        other.iter_mut().for_each(|p| p.tensor.data_mut().fill(0.0));
        load_into(&mut other, decode(&encode(&s)).unwrap()).unwrap();
        assert_eq!(other, s);
    }

    #[test]
    fn truncation_and_shape_errors() {
        let bytes = encode(&store());
        assert!(decode(&bytes[..bytes.len() - 1]).is_err());
        let mut wrong = ParamStore::new();
        wrong.add("a.w", Tensor::zeros([3, 2])).unwrap();
        wrong.add("b", Tensor::zeros([1])).unwrap();
        assert!(load_into(&mut wrong, decode(&bytes).unwrap()).is_err());
    }

    #[test]
    fn files_and_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.ckpt");
        let s = store();
        save(&s, serde_json::json!({"c": 8}), &path).unwrap();
        let m = read_manifest(&path).unwrap();
        assert_eq!(m.parameters[0].name, "a.w");
        assert_eq!(m.parameters[1].shape, [1]);
        assert_eq!(m.config["c"], 8);
        let mut t = store();
        t.iter_mut().for_each(|p| p.tensor.data_mut().fill(9.0));
        load(&mut t, &path).unwrap();
        assert_eq!(t, s);
    }
}
