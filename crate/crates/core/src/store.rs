//! Versioned container of named `f32` arrays plus a JSON manifest.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "CSAIARC\0"
//! version    u32      FORMAT_VERSION
//! length     u64      byte length of the manifest
//! manifest   JSON     {"version", "kind", "meta", "arrays": [{"name", "shape"}]}
//! payload    f32...   arrays in manifest order, row-major
//! ```
//!
//! Readers reject any other version. Checkpoints, prepared datasets and head
//! weights all use this container with different `kind` values.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::numerics::{Array, ParamStore};

pub const MAGIC: &[u8; 8] = b"CSAIARC\0";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ArrayEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    version: u32,
    kind: String,
    meta: Value,
    arrays: Vec<ArrayEntry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Archive {
    pub kind: String,
    pub meta: Value,
    pub arrays: ParamStore,
}

impl Archive {
    pub fn new(kind: impl Into<String>, meta: Value, arrays: ParamStore) -> Self {
        Self {
            kind: kind.into(),
            meta,
            arrays,
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let manifest = Manifest {
            version: FORMAT_VERSION,
            kind: self.kind.clone(),
            meta: self.meta.clone(),
            arrays: self
                .arrays
                .iter()
                .map(|(name, a)| ArrayEntry {
                    name: name.clone(),
                    shape: a.shape().to_vec(),
                })
                .collect(),
        };
        let json = serde_json::to_vec(&manifest)?;
        let payload: usize = self.arrays.total_size() * 4;
        let mut out = Vec::with_capacity(20 + json.len() + payload);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, a) in self.arrays.iter() {
            for x in a.data() {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let bad = |message: String| Error::Archive {
            path: path.to_path_buf(),
            message,
        };
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not an archive (bad magic)".into()));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(bad(format!(
                "format version {version} is not supported (expected {FORMAT_VERSION})"
            )));
        }
        let len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let json_end = 20usize
            .checked_add(len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated manifest".into()))?;
        let manifest: Manifest = serde_json::from_slice(&bytes[20..json_end])
            .map_err(|e| bad(format!("manifest: {e}")))?;
        if manifest.version != FORMAT_VERSION {
            return Err(bad(format!(
                "manifest version {} is not supported (expected {FORMAT_VERSION})",
                manifest.version
            )));
        }
        let mut offset = json_end;
        let mut arrays = ParamStore::new();
        for entry in manifest.arrays {
            let n: usize = entry.shape.iter().product();
            let end = offset + n * 4;
            if end > bytes.len() {
                return Err(bad(format!("truncated payload for `{}`", entry.name)));
            }
            let data: Vec<f32> = bytes[offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let a = Array::new(entry.shape, data).map_err(|e| bad(e.to_string()))?;
            arrays.insert(entry.name, a);
            offset = end;
        }
        if offset != bytes.len() {
            return Err(bad(format!("{} trailing bytes", bytes.len() - offset)));
        }
        Ok(Self {
            kind: manifest.kind,
            meta: manifest.meta,
            arrays,
        })
    }

    /// Writes via a temporary sibling file and rename.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path, kind: &str) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        let a = Self::from_bytes(&bytes, path)?;
        if a.kind != kind {
            return Err(Error::Archive {
                path: path.to_path_buf(),
                message: format!("expected a `{kind}` archive, found `{}`", a.kind),
            });
        }
        Ok(a)
    }
}

pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}
