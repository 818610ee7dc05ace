//! Named-array container: the one binary format in the crate, used for
//! checkpoints and image stores.
//!
//! Byte layout (all integers little-endian):
//!
//! ```text
//! offset 0   8 bytes   magic "CMDSENDA"
//! offset 8   u32       format version (currently 1)
//! offset 12  u32       manifest length in bytes
//! offset 16  ...       manifest: JSON array of {name, shape, offset}
//! after      ...       payload: f64 values, little-endian, back to back
//! ```
//!
//! Each manifest `offset` is in bytes relative to the start of the payload
//! section. Entries are written in insertion order and the manifest is plain
//! JSON, so identical contents produce identical files.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numcore::tensor::numel;

const MAGIC: &[u8; 8] = b"CMDSENDA";
const VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    offset: u64,
}

#[derive(Debug, Default)]
pub struct NamedArrays {
    entries: Vec<(String, Vec<usize>, Vec<f64>)>,
    index: HashMap<String, usize>,
}

impl NamedArrays {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: &str, shape: &[usize], data: Vec<f64>) -> Result<()> {
        if self.index.contains_key(name) {
            return Err(Error::DuplicateParam(name.to_string()));
        }
        if data.len() != numel(shape) {
            return Err(Error::DataLength {
                len: data.len(),
                shape: shape.to_vec(),
            });
        }
        self.index.insert(name.to_string(), self.entries.len());
        self.entries.push((name.to_string(), shape.to_vec(), data));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<(&[usize], &[f64])> {
        self.index
            .get(name)
            .map(|&i| (&self.entries[i].1[..], &self.entries[i].2[..]))
    }

    pub fn take(&mut self, name: &str) -> Option<(Vec<usize>, Vec<f64>)> {
        let i = *self.index.get(name)?;
        let (_, shape, data) = &mut self.entries[i];
        Some((std::mem::take(shape), std::mem::take(data)))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &[usize], &[f64])> {
        self.entries
            .iter()
            .map(|(n, s, d)| (n.as_str(), &s[..], &d[..]))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _, _)| n.as_str())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = Vec::with_capacity(self.entries.len());
        let mut offset = 0u64;
        for (name, shape, data) in &self.entries {
            manifest.push(ManifestEntry {
                name: name.clone(),
                shape: shape.clone(),
                offset,
            });
            offset += (data.len() * 8) as u64;
        }
        let manifest_json = serde_json::to_vec(&manifest).expect("manifest serializes");
        let mut out =
            Vec::with_capacity(16 + manifest_json.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest_json.len() as u32).to_le_bytes());
        out.extend_from_slice(&manifest_json);
        for (_, _, data) in &self.entries {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn write_to(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn from_bytes(bytes: &[u8], origin: &str) -> Result<Self> {
        let bad = |msg: &str| Error::BadContainer {
            path: origin.to_string(),
            msg: msg.to_string(),
        };
        if bytes.len() < 16 {
            return Err(Error::TruncatedContainer {
                path: origin.to_string(),
                offset: bytes.len() as u64,
            });
        }
        if &bytes[..8] != MAGIC {
            return Err(bad("wrong magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let manifest_len = u32::from_le_bytes(bytes[12..16].try_into().unwrap()) as usize;
        if bytes.len() < 16 + manifest_len {
            return Err(Error::TruncatedContainer {
                path: origin.to_string(),
                offset: bytes.len() as u64,
            });
        }
        let manifest: Vec<ManifestEntry> =
            serde_json::from_slice(&bytes[16..16 + manifest_len])
                .map_err(|e| bad(&format!("manifest: {e}")))?;
        let payload = &bytes[16 + manifest_len..];
        let mut arrays = NamedArrays::new();
        for entry in manifest {
            let count = numel(&entry.shape);
            let start = entry.offset as usize;
            let end = start + count * 8;
            if end > payload.len() {
                return Err(Error::TruncatedContainer {
                    path: origin.to_string(),
                    offset: (16 + manifest_len + payload.len()) as u64,
                });
            }
            let data: Vec<f64> = payload[start..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            arrays.push(&entry.name, &entry.shape, data)?;
        }
        Ok(arrays)
    }

    pub fn read_from(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes, &path.display().to_string())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> NamedArrays {
        let mut a = NamedArrays::new();
        a.push("w1", &[2, 2], vec![1.0, -2.5, 3.25, 0.0]).unwrap();
        a.push("b", &[3], vec![f64::MIN_POSITIVE, 1e300, -0.1]).unwrap();
        a
    }

    #[test]
    fn round_trips_exactly() {
        let a = sample();
        let bytes = a.to_bytes();
        let b = NamedArrays::from_bytes(&bytes, "mem").unwrap();
        assert_eq!(a.len(), b.len());
        for ((n1, s1, d1), (n2, s2, d2)) in a.iter().zip(b.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(s1, s2);
            let bits1: Vec<u64> = d1.iter().map(|v| v.to_bits()).collect();
            let bits2: Vec<u64> = d2.iter().map(|v| v.to_bits()).collect();
            assert_eq!(bits1, bits2);
        }
    }

    #[test]
    fn identical_content_identical_bytes() {
        assert_eq!(sample().to_bytes(), sample().to_bytes());
    }

    #[test]
    fn truncation_is_reported_with_offset() {
        let bytes = sample().to_bytes();
        let cut = &bytes[..bytes.len() - 9];
        match NamedArrays::from_bytes(cut, "mem") {
            Err(Error::TruncatedContainer { offset, .. }) => {
                assert_eq!(offset, cut.len() as u64)
            }
            other => panic!("expected truncation error, got {other:?}"),
        }
    }

    #[test]
    fn wrong_magic_is_rejected() {
        let mut bytes = sample().to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            NamedArrays::from_bytes(&bytes, "mem"),
            Err(Error::BadContainer { .. })
        ));
    }
}
