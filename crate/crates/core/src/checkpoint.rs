//! Flat binary tensor container.
//!
//! Byte layout (all integers little-endian):
//!
//! | offset     | size | content                                  |
//! |------------|------|------------------------------------------|
//! | 0          | 8    | magic `HSI3DTC1`                          |
//! | 8          | 8    | `u64` length `J` of the JSON index        |
//! | 16         | J    | UTF-8 JSON index                          |
//! | 16 + J     | ...  | data section: packed `f32` values         |
//!
//! The index is `{"tensors": {name: {"shape": [..], "offset": o}}, "metadata": any}`
//! where `o` is the byte offset of the tensor inside the data section. Tensors
//! are stored contiguously in name order and the data section holds exactly
//! their values, so the file length is fully determined by the index.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

pub const MAGIC: &[u8; 8] = b"HSI3DTC1";

#[derive(Serialize, Deserialize)]
struct Entry {
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Serialize, Deserialize)]
struct Index {
    tensors: BTreeMap<String, Entry>,
    #[serde(default)]
    metadata: serde_json::Value,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Container {
    pub tensors: BTreeMap<String, Tensor<f32>>,
    pub metadata: serde_json::Value,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    /// Stores `tensor` as `f32` under `name`, replacing any previous entry.
    pub fn insert<R: Real>(&mut self, name: impl Into<String>, tensor: &Tensor<R>) {
        self.tensors.insert(name.into(), tensor.cast::<f32>());
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<f32>> {
        self.tensors.get(name)
    }

    /// Looks up `name`, converting to `R` and checking the shape when given.
    pub fn require<R: Real>(&self, name: &str, shape: Option<&[usize]>) -> Result<Tensor<R>> {
        let t = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::Config(format!("container has no tensor {name:?}")))?;
        if let Some(shape) = shape {
            if t.shape() != shape {
                return Err(Error::Shape {
                    name: name.to_string(),
                    expected: shape.to_vec(),
                    found: t.shape().to_vec(),
                });
            }
        }
        Ok(t.cast())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut offset = 0u64;
        let mut entries = BTreeMap::new();
        for (name, t) in &self.tensors {
            entries.insert(
                name.clone(),
                Entry {
                    shape: t.shape().to_vec(),
                    offset,
                },
            );
            offset += 4 * t.len() as u64;
        }
        let index = serde_json::to_vec(&Index {
            tensors: entries,
            metadata: self.metadata.clone(),
        })?;
        let mut out = Vec::with_capacity(16 + index.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(index.len() as u64).to_le_bytes());
        out.extend_from_slice(&index);
        for t in self.tensors.values() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |msg: &str| Error::malformed(path, msg);
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(bad("missing container header"));
        }
        let index_len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let data_start = 16usize
            .checked_add(index_len)
            .filter(|&end| end <= bytes.len())
            .ok_or_else(|| bad("index extends past end of file"))?;
        let index: Index = serde_json::from_slice(&bytes[16..data_start])
            .map_err(|e| Error::malformed(path, format!("bad index: {e}")))?;
        let data = &bytes[data_start..];
        let mut expected_len = 0usize;
        let mut tensors = BTreeMap::new();
        for (name, entry) in index.tensors {
            let numel: usize = entry.shape.iter().product();
            let start = entry.offset as usize;
            let end = start
                .checked_add(4 * numel)
                .filter(|&end| end <= data.len())
                .ok_or_else(|| Error::malformed(path, format!("tensor {name:?} is truncated")))?;
            let values = data[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(entry.shape, values).map_err(|e| Error::malformed(path, format!("{name:?}: {e}")))?;
            expected_len += 4 * numel;
            tensors.insert(name, t);
        }
        if expected_len != data.len() {
            return Err(bad("data section length does not match the index"));
        }
        Ok(Container {
            tensors,
            metadata: index.metadata,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, path)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new();
        c.insert("b", &Tensor::<f32>::from_fn(&[2, 3], |i| i as f32 * 0.25 - 1.0));
        c.insert("a", &Tensor::<f32>::from_fn(&[4], |i| (i as f32).sqrt()));
        c.metadata = serde_json::json!({"kind": "test"});
        c
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let c = sample();
        let bytes = c.to_bytes().unwrap();
        let back = Container::from_bytes(&bytes, Path::new("mem")).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_bytes().unwrap(), bytes);
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes().unwrap();
        assert_eq!(&bytes[..8], MAGIC);
        let j = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 16 + j + 4 * 10);
        // "a" sorts first, so the data section starts with sqrt(0) = 0.0
        assert_eq!(&bytes[16 + j..16 + j + 4], &0f32.to_le_bytes());
    }

    #[test]
    fn truncation_is_detected() {
        let bytes = sample().to_bytes().unwrap();
        for cut in [0, 10, 20, bytes.len() - 1] {
            let err = Container::from_bytes(&bytes[..cut], Path::new("mem")).unwrap_err();
            assert!(matches!(err, Error::Malformed { .. }), "cut {cut}: {err}");
        }
        let mut padded = bytes.clone();
        padded.push(0);
        assert!(Container::from_bytes(&padded, Path::new("mem")).is_err());
    }

    #[test]
    fn require_checks_shape() {
        let c = sample();
        assert!(c.require::<f64>("a", Some(&[4])).is_ok());
        assert!(matches!(c.require::<f64>("a", Some(&[5])), Err(Error::Shape { .. })));
        assert!(c.require::<f64>("zzz", None).is_err());
    }
}
