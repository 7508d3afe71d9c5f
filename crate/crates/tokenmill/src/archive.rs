//! Named-tensor archive: one JSON manifest line, then a raw f32 blob.
//!
//! The file layout is a single line of JSON (an array of entries with
//! `name`, `shape`, `dtype`, and `byte_offset`), a `\n`, and the
//! concatenated little-endian f32 data of every tensor in manifest order.
//! Offsets are relative to the start of the blob. Readers verify that the
//! declared offsets match the packed layout exactly and that the blob length
//! is consistent, so a truncated or reordered file is rejected rather than
//! silently misread.
//!
//! Values are stored as f32 and widened to f64 on load; writing narrows.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    shape: Vec<usize>,
    dtype: String,
    byte_offset: u64,
}

/// An ordered collection of named tensors with a stable on-disk encoding.
///
/// Iteration and serialization follow insertion order, so building an
/// archive the same way twice produces byte-identical files.
#[derive(Debug, Default, Clone)]
pub struct Archive {
    entries: Vec<(String, Tensor)>,
}

impl Archive {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a tensor under `name`. Names must be unique.
    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        let name = name.into();
        if self.entries.iter().any(|(n, _)| *n == name) {
            return Err(Error::Archive(format!("duplicate tensor name `{name}`")));
        }
        self.entries.push((name, tensor));
        Ok(())
    }

    /// Looks up a tensor by name.
    pub fn get(&self, name: &str) -> Result<&Tensor> {
        self.entries
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::MissingTensor(name.to_string()))
    }

    /// Like [`get`](Self::get), but also checks the tensor's shape.
    pub fn get_with_shape(&self, name: &str, shape: &[usize]) -> Result<&Tensor> {
        let t = self.get(name)?;
        if t.shape() != shape {
            return Err(Error::Archive(format!(
                "tensor `{name}` has shape {:?}, expected {:?}",
                t.shape(),
                shape
            )));
        }
        Ok(t)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.iter().any(|(n, _)| n == name)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    /// Serializes the archive: manifest line, newline, packed f32 blob.
    pub fn write_to(&self, mut w: impl Write) -> Result<()> {
        let mut manifest = Vec::with_capacity(self.entries.len());
        let mut offset = 0u64;
        for (name, tensor) in &self.entries {
            manifest.push(ManifestEntry {
                name: name.clone(),
                shape: tensor.shape().to_vec(),
                dtype: "f32".to_string(),
                byte_offset: offset,
            });
            offset += (tensor.numel() * 4) as u64;
        }
        let header = serde_json::to_string(&manifest)
            .map_err(|e| Error::Archive(format!("manifest encode failed: {e}")))?;
        w.write_all(header.as_bytes())?;
        w.write_all(b"\n")?;
        for (_, tensor) in &self.entries {
            for &v in tensor.data() {
                w.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }

    /// Parses an archive, validating the manifest against the blob layout.
    pub fn read_from(mut r: impl Read) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let newline = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Archive("missing manifest line".into()))?;
        let manifest: Vec<ManifestEntry> = serde_json::from_slice(&bytes[..newline])
            .map_err(|e| Error::Archive(format!("manifest parse failed: {e}")))?;
        let blob = &bytes[newline + 1..];

        let mut entries = Vec::with_capacity(manifest.len());
        let mut offset = 0u64;
        for entry in &manifest {
            if entry.dtype != "f32" {
                return Err(Error::Archive(format!(
                    "tensor `{}` has unsupported dtype `{}`",
                    entry.name, entry.dtype
                )));
            }
            if entry.byte_offset != offset {
                return Err(Error::Archive(format!(
                    "tensor `{}` declares byte_offset {}, packed layout requires {offset}",
                    entry.name, entry.byte_offset
                )));
            }
            if entries.iter().any(|(n, _): &(String, Tensor)| *n == entry.name) {
                return Err(Error::Archive(format!(
                    "duplicate tensor name `{}`",
                    entry.name
                )));
            }
            let numel: usize = entry.shape.iter().product();
            let nbytes = numel * 4;
            let start = offset as usize;
            let end = start + nbytes;
            if end > blob.len() {
                return Err(Error::Archive(format!(
                    "tensor `{}` extends to byte {end}, blob has {}",
                    entry.name,
                    blob.len()
                )));
            }
            let data: Vec<f64> = blob[start..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            entries.push((entry.name.clone(), Tensor::new(entry.shape.clone(), data)?));
            offset = end as u64;
        }
        if offset as usize != blob.len() {
            return Err(Error::Archive(format!(
                "blob has {} trailing bytes past the manifest layout",
                blob.len() - offset as usize
            )));
        }
        Ok(Self { entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        self.write_to(&mut w)?;
        w.flush()?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::read_from(BufReader::new(File::open(path)?))
    }
}
