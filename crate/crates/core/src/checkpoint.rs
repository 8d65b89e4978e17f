//! Binary checkpoint container.
//!
//! Layout: `"MDRG"`, `u32` version, `u64` metadata length, UTF-8 JSON
//! metadata, then the tensor blobs. All integers are little-endian. The
//! metadata holds a free-form `config` object and a `tensors` manifest
//! (name, shape, dtype, byte offset into the blob region) sorted by name;
//! blobs follow in manifest order.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Scalar, Tensor};

pub const MAGIC: &[u8; 4] = b"MDRG";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    pub offset: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Metadata {
    config: Value,
    tensors: Vec<ManifestEntry>,
}

#[derive(Clone, Debug, PartialEq)]
struct RawTensor {
    shape: Vec<usize>,
    dtype: String,
    bytes: Vec<u8>,
}

/// An in-memory checkpoint: metadata plus raw tensor bytes keyed by name.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub config: Value,
    tensors: BTreeMap<String, RawTensor>,
}

impl Checkpoint {
    pub fn new(config: Value) -> Self {
        Self {
            config,
            tensors: BTreeMap::new(),
        }
    }

    pub fn insert<T: Scalar>(&mut self, name: impl Into<String>, t: &Tensor<T>) {
        let mut bytes = Vec::with_capacity(t.numel() * T::BYTES);
        for &x in &t.data {
            x.write_le(&mut bytes);
        }
        self.tensors.insert(
            name.into(),
            RawTensor {
                shape: t.shape.clone(),
                dtype: T::DTYPE.to_string(),
                bytes,
            },
        );
    }

    /// Adds every tensor of `params` under `prefix`.
    pub fn insert_params<T: Scalar, P: ParamSet<T>>(&mut self, prefix: &str, params: &P) {
        for (name, t) in params.named() {
            self.insert(format!("{prefix}{name}"), t);
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn tensor<T: Scalar>(&self, name: &str) -> Result<Tensor<T>> {
        let raw = self
            .tensors
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        if raw.dtype != T::DTYPE {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` has dtype {}, expected {}",
                raw.dtype,
                T::DTYPE
            )));
        }
        let data = raw.bytes.chunks(T::BYTES).map(T::read_le).collect();
        Ok(Tensor {
            shape: raw.shape.clone(),
            data,
        })
    }

    /// Overwrites every tensor of `params` from entries under `prefix`,
    /// requiring identical shapes.
    pub fn load_params<T: Scalar, P: ParamSet<T>>(&self, prefix: &str, params: &mut P) -> Result<()> {
        for (name, t) in params.named_mut() {
            let full = format!("{prefix}{name}");
            let loaded = self.tensor::<T>(&full)?;
            if loaded.shape != t.shape {
                return Err(Error::Checkpoint(format!(
                    "tensor `{full}` has shape {:?} but the configured model expects {:?}",
                    loaded.shape, t.shape
                )));
            }
            *t = loaded;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut manifest = Vec::with_capacity(self.tensors.len());
        let mut offset = 0u64;
        for (name, raw) in &self.tensors {
            manifest.push(ManifestEntry {
                name: name.clone(),
                shape: raw.shape.clone(),
                dtype: raw.dtype.clone(),
                offset,
            });
            offset += raw.bytes.len() as u64;
        }
        let meta = serde_json::to_vec(&Metadata {
            config: self.config.clone(),
            tensors: manifest,
        })
        .expect("metadata serializes");
        let mut out = Vec::with_capacity(16 + meta.len() + offset as usize);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        for raw in self.tensors.values() {
            out.extend_from_slice(&raw.bytes);
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let meta_end = 16usize
            .checked_add(meta_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| Error::Checkpoint("truncated metadata".into()))?;
        let meta: Metadata = serde_json::from_slice(&bytes[16..meta_end])
            .map_err(|e| Error::Checkpoint(format!("metadata: {e}")))?;
        let blobs = &bytes[meta_end..];
        let mut tensors = BTreeMap::new();
        let mut expected_offset = 0u64;
        let mut prev: Option<&str> = None;
        for entry in &meta.tensors {
            if prev.is_some_and(|p| p >= entry.name.as_str()) {
                return Err(Error::Checkpoint("manifest is not sorted by name".into()));
            }
            prev = Some(&entry.name);
            let width = match entry.dtype.as_str() {
                "f32" => 4,
                "f64" => 8,
                other => return Err(Error::Checkpoint(format!("unknown dtype {other}"))),
            };
            if entry.offset != expected_offset {
                return Err(Error::Checkpoint(format!(
                    "tensor `{}` offset {} is not contiguous",
                    entry.name, entry.offset
                )));
            }
            let len = entry.shape.iter().product::<usize>() * width;
            let start = entry.offset as usize;
            let data = blobs
                .get(start..start + len)
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{}` truncated", entry.name)))?;
            expected_offset += len as u64;
            tensors.insert(
                entry.name.clone(),
                RawTensor {
                    shape: entry.shape.clone(),
                    dtype: entry.dtype.clone(),
                    bytes: data.to_vec(),
                },
            );
        }
        if expected_offset as usize != blobs.len() {
            return Err(Error::Checkpoint("trailing bytes after tensor blobs".into()));
        }
        Ok(Self {
            config: meta.config,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }

    /// Manifest as written to disk, in order.
    pub fn manifest(&self) -> Vec<ManifestEntry> {
        let mut offset = 0;
        self.tensors
            .iter()
            .map(|(name, raw)| {
                let e = ManifestEntry {
                    name: name.clone(),
                    shape: raw.shape.clone(),
                    dtype: raw.dtype.clone(),
                    offset,
                };
                offset += raw.bytes.len() as u64;
                e
            })
            .collect()
    }
}
