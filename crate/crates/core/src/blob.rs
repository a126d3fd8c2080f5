//! Shared helpers for the manifest + little-endian blob file pairs used by
//! checkpoints and knowledge bases.

use std::fs;
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::numerics::Tensor;

/// Location of one tensor inside a blob, in `f64` elements.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

#[derive(Default)]
pub struct BlobWriter {
    bytes: Vec<u8>,
    entries: Vec<TensorEntry>,
}

impl BlobWriter {
    pub fn push(&mut self, name: impl Into<String>, tensor: &Tensor) {
        self.push_raw(name, tensor.shape().to_vec(), tensor.data());
    }

    pub fn push_raw(&mut self, name: impl Into<String>, shape: Vec<usize>, data: &[f64]) {
        self.entries.push(TensorEntry {
            name: name.into(),
            shape,
            offset: self.bytes.len() / 8,
        });
        for v in data {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn finish(self) -> (Vec<u8>, Vec<TensorEntry>) {
        (self.bytes, self.entries)
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Reads a blob and checks its length and checksum.
pub fn read_verified(path: &Path, expected_bytes: usize, expected_sha: &str) -> Result<Vec<u8>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != expected_bytes {
        return Err(Error::Integrity(format!(
            "{}: {} bytes, manifest declares {expected_bytes}",
            path.display(),
            bytes.len()
        )));
    }
    let sha = sha256_hex(&bytes);
    if sha != expected_sha {
        return Err(Error::Integrity(format!(
            "{}: checksum {sha} does not match manifest",
            path.display()
        )));
    }
    Ok(bytes)
}

pub fn tensor_at(bytes: &[u8], entry: &TensorEntry) -> Result<Tensor> {
    let len: usize = entry.shape.iter().product();
    let start = entry.offset * 8;
    let end = start + len * 8;
    if end > bytes.len() {
        return Err(Error::Integrity(format!(
            "tensor {} extends past the blob",
            entry.name
        )));
    }
    let data = bytes[start..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
        .collect();
    Tensor::new(entry.shape.clone(), data)
        .map_err(|e| Error::Integrity(format!("tensor {}: {e}", entry.name)))
}

pub fn find<'a>(entries: &'a [TensorEntry], name: &str) -> Result<&'a TensorEntry> {
    entries
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::Integrity(format!("manifest lacks tensor {name}")))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_vec_pretty(value).map_err(|e| Error::json(path, e))?;
    text.push(b'\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Parses a JSON manifest after checking its `format` tag.
pub fn read_manifest<T: DeserializeOwned>(path: &Path, format: &str) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let value: serde_json::Value = serde_json::from_str(&text)
        .map_err(|e| Error::Format(format!("{}: {e}", path.display())))?;
    match value.get("format").and_then(|f| f.as_str()) {
        Some(f) if f == format => {}
        Some(other) => {
            return Err(Error::Compatibility {
                expected: format.into(),
                found: other.into(),
            })
        }
        None => {
            return Err(Error::Format(format!(
                "{}: missing format tag",
                path.display()
            )))
        }
    }
    serde_json::from_value(value).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
}

pub fn ensure_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

/// One JSON document per line.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<()> {
    let mut out = Vec::new();
    for item in items {
        serde_json::to_writer(&mut out, item).map_err(|e| Error::json(path, e))?;
        out.push(b'\n');
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l)
                .map_err(|e| Error::Format(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}
