//! Self-describing binary archive for parameter grids.
//!
//! Layout: 8-byte magic `TKARCH\0\0`, u32 LE format version, u32 LE length of
//! a JSON metadata document, the document, then every array as row-major
//! little-endian `f32` values in the order listed in the document's table.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::tokens::write_file;

const MAGIC: &[u8; 8] = b"TKARCH\0\0";
pub const ARCHIVE_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ArrayEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Document {
    version: u32,
    kind: String,
    meta: Value,
    arrays: Vec<ArrayEntry>,
}

/// A labelled bundle of metadata and named 2-D arrays.
#[derive(Debug, Clone, PartialEq)]
pub struct Archive {
    pub kind: String,
    pub meta: Value,
    pub arrays: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn new(kind: impl Into<String>, meta: Value) -> Self {
        Self {
            kind: kind.into(),
            meta,
            arrays: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.arrays.push((name.into(), tensor));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.arrays
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::Malformed(format!("archive has no array `{name}`")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.arrays.iter().any(|(n, _)| n == name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let doc = Document {
            version: ARCHIVE_VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|(name, t)| ArrayEntry {
                    name: name.clone(),
                    rows: t.rows,
                    cols: t.cols,
                })
                .collect(),
        };
        let json = serde_json::to_vec(&doc).expect("archive metadata serializes");
        let payload: usize = self.arrays.iter().map(|(_, t)| t.len() * 4).sum();
        let mut out = Vec::with_capacity(16 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&ARCHIVE_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.arrays {
            for &v in &t.data {
                out.extend_from_slice(&(v as f32).to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..8] != MAGIC {
            return Err(Error::Malformed("missing archive magic".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != ARCHIVE_VERSION {
            return Err(Error::Malformed(format!("unsupported archive version {version}")));
        }
        let hlen = u32::from_le_bytes(bytes[12..16].try_into().expect("4 bytes")) as usize;
        let body = bytes
            .get(16..16 + hlen)
            .ok_or_else(|| Error::Malformed("truncated archive metadata".into()))?;
        let doc: Document = serde_json::from_slice(body)?;
        let mut cursor = 16 + hlen;
        let mut arrays = Vec::with_capacity(doc.arrays.len());
        for entry in doc.arrays {
            let n = entry.rows * entry.cols;
            let raw = bytes
                .get(cursor..cursor + 4 * n)
                .ok_or_else(|| Error::Malformed(format!("truncated array `{}`", entry.name)))?;
            cursor += 4 * n;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            arrays.push((entry.name, Tensor::from_vec(entry.rows, entry.cols, data)));
        }
        if cursor != bytes.len() {
            return Err(Error::Malformed("trailing bytes after archive arrays".into()));
        }
        Ok(Self {
            kind: doc.kind,
            meta: doc.meta,
            arrays,
        })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_file(path, &self.to_bytes())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Rounds every value to the nearest `f32`, matching what an archive stores.
pub fn round_to_f32(t: &mut Tensor) {
    for v in &mut t.data {
        *v = *v as f32 as f64;
    }
}
