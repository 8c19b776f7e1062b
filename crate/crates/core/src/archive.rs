//! Single-file tensor archive.
//!
//! Layout: 4-byte magic `TCLA`, an 8-byte little-endian header length, a UTF-8
//! JSON header mapping tensor name to `{dtype, shape, offset, length}` plus a
//! free-form `meta` object, then the raw little-endian f32 buffers. Offsets
//! are relative to the start of the data section and contiguous in header
//! declaration order (keys are sorted, so byte output is deterministic).

use crate::error::{Error, Result};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

pub const MAGIC: &[u8; 4] = b"TCLA";

#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorEntry {
    dtype: String,
    shape: Vec<usize>,
    offset: u64,
    length: u64,
}

/// In-memory view of an archive: named f32 tensors with shapes, plus metadata.
#[derive(Debug, Clone, Default)]
pub struct TensorArchive {
    tensors: BTreeMap<String, (Vec<usize>, Vec<f32>)>,
    pub meta: serde_json::Value,
}

impl TensorArchive {
    pub fn new(meta: serde_json::Value) -> Self {
        Self {
            tensors: BTreeMap::new(),
            meta,
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) {
        let name = name.into();
        assert_ne!(name, "meta", "tensor name 'meta' is reserved");
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "shape/data mismatch for {name}"
        );
        self.tensors.insert(name, (shape, data));
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, name: &str) -> Result<(&[usize], &[f32])> {
        self.tensors
            .get(name)
            .map(|(s, d)| (s.as_slice(), d.as_slice()))
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    /// Insert a 2-D f64 array, narrowing to f32 storage.
    pub fn insert_array2(&mut self, name: impl Into<String>, a: &Array2<f64>) {
        let data: Vec<f32> = a.iter().map(|&v| v as f32).collect();
        self.insert(name, vec![a.nrows(), a.ncols()], data);
    }

    pub fn get_array2(&self, name: &str) -> Result<Array2<f64>> {
        let (shape, data) = self.get(name)?;
        if shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                context: format!("archive tensor {name}"),
                expected: "2-D".into(),
                actual: format!("{shape:?}"),
            });
        }
        Ok(Array2::from_shape_vec(
            (shape[0], shape[1]),
            data.iter().map(|&v| v as f64).collect(),
        )
        .expect("validated shape"))
    }

    pub fn insert_array3(&mut self, name: impl Into<String>, a: &Array3<f64>) {
        let data: Vec<f32> = a.iter().map(|&v| v as f32).collect();
        let d = a.dim();
        self.insert(name, vec![d.0, d.1, d.2], data);
    }

    pub fn get_array3(&self, name: &str) -> Result<Array3<f64>> {
        let (shape, data) = self.get(name)?;
        if shape.len() != 3 {
            return Err(Error::ShapeMismatch {
                context: format!("archive tensor {name}"),
                expected: "3-D".into(),
                actual: format!("{shape:?}"),
            });
        }
        Ok(Array3::from_shape_vec(
            (shape[0], shape[1], shape[2]),
            data.iter().map(|&v| v as f64).collect(),
        )
        .expect("validated shape"))
    }

    /// Serialize to the on-disk byte layout.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut header = serde_json::Map::new();
        let mut offset = 0u64;
        for (name, (shape, data)) in &self.tensors {
            let length = 4 * data.len() as u64;
            let entry = TensorEntry {
                dtype: "f32".into(),
                shape: shape.clone(),
                offset,
                length,
            };
            header.insert(
                name.clone(),
                serde_json::to_value(entry).expect("entry serializes"),
            );
            offset += length;
        }
        header.insert("meta".into(), self.meta.clone());
        let header_bytes = serde_json::to_vec(&serde_json::Value::Object(header))
            .expect("header serializes");

        let mut out = Vec::with_capacity(12 + header_bytes.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&(header_bytes.len() as u64).to_le_bytes());
        out.extend_from_slice(&header_bytes);
        for (_, (_, data)) in &self.tensors {
            for v in data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 12 {
            return Err(Error::ArchiveTruncated("shorter than fixed prefix".into()));
        }
        if &bytes[0..4] != MAGIC {
            return Err(Error::ArchiveMagic);
        }
        let header_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        let Some(header_bytes) = bytes.get(12..12 + header_len) else {
            return Err(Error::ArchiveTruncated("header extends past EOF".into()));
        };
        let header: serde_json::Value = serde_json::from_slice(header_bytes)
            .map_err(|e| Error::ArchiveHeader(e.to_string()))?;
        let serde_json::Value::Object(map) = header else {
            return Err(Error::ArchiveHeader("header is not an object".into()));
        };

        let data = &bytes[12 + header_len..];
        let mut tensors = BTreeMap::new();
        let mut meta = serde_json::Value::Null;
        let mut expected_offset = 0u64;
        // BTreeMap-backed serde_json::Map iterates in sorted key order, which
        // is the declaration order offsets were assigned in.
        for (name, value) in map {
            if name == "meta" {
                meta = value;
                continue;
            }
            let entry: TensorEntry = serde_json::from_value(value)
                .map_err(|e| Error::ArchiveHeader(format!("entry {name}: {e}")))?;
            if entry.dtype != "f32" {
                return Err(Error::ArchiveHeader(format!(
                    "tensor {name} has unsupported dtype {}",
                    entry.dtype
                )));
            }
            let count: usize = entry.shape.iter().product();
            if entry.length != 4 * count as u64 {
                return Err(Error::ArchiveHeader(format!(
                    "tensor {name} length {} does not match shape {:?}",
                    entry.length, entry.shape
                )));
            }
            if entry.offset != expected_offset {
                return Err(Error::ArchiveOffsets(name));
            }
            expected_offset = entry.offset + entry.length;
            let start = entry.offset as usize;
            let end = start + entry.length as usize;
            let Some(buf) = data.get(start..end) else {
                return Err(Error::ArchiveTruncated(format!(
                    "tensor {name} data extends past EOF"
                )));
            };
            let values: Vec<f32> = buf
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.insert(name, (entry.shape, values));
        }
        Ok(Self { tensors, meta })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        if let Some(parent) = path.as_ref().parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut f = std::fs::File::create(path)?;
        f.write_all(&self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let mut f = std::fs::File::open(path.as_ref()).map_err(|_| {
            Error::MissingCheckpoint(path.as_ref().display().to_string())
        })?;
        let mut bytes = Vec::new();
        f.read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    #[test]
    fn empty_map_is_valid() {
        let arc = TensorArchive::new(json!({"kind": "empty"}));
        let bytes = arc.to_bytes();
        let back = TensorArchive::from_bytes(&bytes).unwrap();
        assert!(back.is_empty());
        assert_eq!(back.meta["kind"], "empty");
    }

    #[test]
    fn single_tensor_file_length() {
        let mut arc = TensorArchive::new(serde_json::Value::Null);
        arc.insert("w", vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let bytes = arc.to_bytes();
        let header_len = u64::from_le_bytes(bytes[4..12].try_into().unwrap()) as usize;
        assert_eq!(bytes.len(), 12 + header_len + 16);
        let back = TensorArchive::from_bytes(&bytes).unwrap();
        let (shape, data) = back.get("w").unwrap();
        assert_eq!(shape, &[2, 2]);
        assert_eq!(data, &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn magic_mismatch_is_named() {
        let mut arc = TensorArchive::new(serde_json::Value::Null);
        arc.insert("w", vec![1], vec![1.0]);
        let mut bytes = arc.to_bytes();
        bytes[0] = b'X';
        assert!(matches!(
            TensorArchive::from_bytes(&bytes),
            Err(Error::ArchiveMagic)
        ));
    }

    #[test]
    fn truncation_is_named() {
        let mut arc = TensorArchive::new(serde_json::Value::Null);
        arc.insert("w", vec![4], vec![1.0, 2.0, 3.0, 4.0]);
        let bytes = arc.to_bytes();
        let cut = &bytes[..bytes.len() - 5];
        assert!(matches!(
            TensorArchive::from_bytes(cut),
            Err(Error::ArchiveTruncated(_))
        ));
        assert!(matches!(
            TensorArchive::from_bytes(&bytes[..6]),
            Err(Error::ArchiveTruncated(_))
        ));
    }

    #[test]
    fn overlapping_offsets_are_named() {
        let mut arc = TensorArchive::new(serde_json::Value::Null);
        arc.insert("a", vec![2], vec![1.0, 2.0]);
        arc.insert("b", vec![2], vec![3.0, 4.0]);
        let bytes = arc.to_bytes();
        // corrupt offset of "b" in the header text
        let s = String::from_utf8_lossy(&bytes).to_string();
        let corrupted = s.replace("\"offset\":8", "\"offset\":4");
        assert_ne!(s, corrupted, "expected to find offset field to corrupt");
        // header length unchanged (same byte count: "8" -> "4")
        assert!(matches!(
            TensorArchive::from_bytes(corrupted.as_bytes()),
            Err(Error::ArchiveOffsets(_))
        ));
    }

    #[test]
    fn resave_is_byte_identical() {
        let mut arc = TensorArchive::new(json!({"step": 3, "seeds": [1, 2]}));
        arc.insert("z/b", vec![2, 3], vec![0.5; 6]);
        arc.insert("a/w", vec![3], vec![-1.0, 0.0, 1.0]);
        let bytes = arc.to_bytes();
        let back = TensorArchive::from_bytes(&bytes).unwrap();
        assert_eq!(bytes, back.to_bytes());
    }

    #[test]
    fn garbage_header_is_error_not_panic() {
        let mut bytes = Vec::new();
        bytes.extend_from_slice(MAGIC);
        bytes.extend_from_slice(&10u64.to_le_bytes());
        bytes.extend_from_slice(b"not json!!");
        assert!(matches!(
            TensorArchive::from_bytes(&bytes),
            Err(Error::ArchiveHeader(_))
        ));
    }
}
