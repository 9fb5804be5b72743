//! Versioned single-file weight archive.
//!
//! Layout: the 8-byte magic, a little-endian `u32` version, a `u64` header
//! length, a JSON header, then the raw little-endian tensor payload. Header
//! entries give each tensor's name, role, shape and byte offset.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gfem::{GfemConfig, GfemWeights};
use crate::msfm::{MsfmConfig, MsfmWeights};
use crate::params::ParamStore;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"MATCNNCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub step: usize,
    pub mean_total_loss: Option<f64>,
    pub train_seed: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
enum Role {
    Param,
    Buffer,
    Gfem,
}

#[derive(Debug, Serialize, Deserialize)]
struct Entry {
    name: String,
    role: Role,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    dtype: String,
    msfm: MsfmConfig,
    /// The extractor namespace, including its freeze flag and seed.
    gfem: GfemConfig,
    meta: CheckpointMeta,
    tensors: Vec<Entry>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint<T> {
    pub msfm: MsfmWeights<T>,
    pub gfem: GfemWeights<T>,
    pub meta: CheckpointMeta,
}

fn ck_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Checkpoint {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

impl<T: Scalar> Checkpoint<T> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut payload = Vec::new();
        let mut entries = Vec::new();
        let groups: [(&ParamStore<T>, Role); 3] = [
            (&self.msfm.params, Role::Param),
            (&self.msfm.buffers, Role::Buffer),
            (&self.gfem.params, Role::Gfem),
        ];
        for (store, role) in groups {
            for (name, t) in store.iter() {
                entries.push(Entry {
                    name: name.to_string(),
                    role,
                    shape: t.shape().to_vec(),
                    offset: payload.len(),
                });
                for &v in t.data() {
                    v.write_le(&mut payload);
                }
            }
        }
        let header = Header {
            dtype: T::DTYPE.to_string(),
            msfm: self.msfm.config.clone(),
            gfem: self.gfem.config.clone(),
            meta: self.meta.clone(),
            tensors: entries,
        };
        let json = serde_json::to_vec(&header).expect("header serializes");
        let mut out = Vec::with_capacity(20 + json.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        out.extend_from_slice(&payload);
        out
    }

    /// Parses an archive; tensors stored in another precision are converted.
    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(ck_err(path, "not a checkpoint archive"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::CheckpointVersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| ck_err(path, "truncated header"))?;
        let header: Header =
            serde_json::from_slice(&bytes[20..body]).map_err(|e| ck_err(path, format!("bad header: {e}")))?;
        let payload = &bytes[body..];
        let width = match header.dtype.as_str() {
            "f32" => 4,
            "f64" => 8,
            d => return Err(ck_err(path, format!("unknown dtype {d}"))),
        };
        let mut params = ParamStore::new();
        let mut buffers = ParamStore::new();
        let mut gfem = ParamStore::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let end = e.offset + n * width;
            let raw = payload
                .get(e.offset..end)
                .ok_or_else(|| ck_err(path, format!("tensor {} exceeds payload", e.name)))?;
            let data: Vec<T> = raw
                .chunks_exact(width)
                .map(|c| match width {
                    4 => T::of(f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64),
                    _ => T::of(f64::from_le_bytes(c.try_into().expect("8 bytes"))),
                })
                .collect();
            let t = Tensor::new(&e.shape, data)?;
            if !t.all_finite() {
                return Err(ck_err(path, format!("tensor {} is not finite", e.name)));
            }
            match e.role {
                Role::Param => params.insert(e.name, t),
                Role::Buffer => buffers.insert(e.name, t),
                Role::Gfem => gfem.insert(e.name, t),
            }
        }
        header.msfm.validate()?;
        header.gfem.validate()?;
        Ok(Self {
            msfm: MsfmWeights {
                config: header.msfm,
                params,
                buffers,
            },
            gfem: GfemWeights {
                config: header.gfem,
                params: gfem,
            },
            meta: header.meta,
        })
    }

    /// Writes to a sibling temporary file, then renames over `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = tmp_path(path);
        let ctx = || format!("writing checkpoint {}", path.display());
        {
            let mut f = fs::File::create(&tmp).map_err(|e| Error::io(ctx(), e))?;
            f.write_all(&self.to_bytes()).map_err(|e| Error::io(ctx(), e))?;
            f.sync_all().map_err(|e| Error::io(ctx(), e))?;
        }
        fs::rename(&tmp, path).map_err(|e| Error::io(ctx(), e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(format!("reading checkpoint {}", path.display()), e))?;
        Self::from_bytes(&bytes, path)
    }
}

fn tmp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(".tmp");
    path.with_file_name(name)
}
