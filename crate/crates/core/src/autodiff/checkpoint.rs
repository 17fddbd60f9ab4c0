//! Checkpoint files: named f64 arrays with shape headers.
//!
//! Binary layout (little endian):
//!
//! ```text
//! magic  "SRCK" (4 bytes)
//! version u32
//! count   u64
//! entries: name_len u32, name utf-8, rows u64, cols u64, rows*cols f64
//! ```
//!
//! The format round-trips bit-exactly.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use thiserror::Error;

use super::tensor::Tensor;

const MAGIC: &[u8; 4] = b"SRCK";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} is not a checkpoint file (bad magic)")]
    BadMagic { path: String },
    #[error("unsupported checkpoint version {version} in {path}")]
    BadVersion { path: String, version: u32 },
    #[error("checkpoint {path} is truncated or malformed: {detail}")]
    Malformed { path: String, detail: String },
    #[error("missing entry {name}")]
    MissingEntry { name: String },
}

/// An ordered map of named tensors.
#[derive(Default, Debug, Clone)]
pub struct Checkpoint {
    entries: BTreeMap<String, Tensor>,
}

impl Checkpoint {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Tensor) {
        self.entries.insert(name.into(), value);
    }

    pub fn insert_scalar(&mut self, name: impl Into<String>, value: f64) {
        self.insert(name, Tensor::scalar(value));
    }

    pub fn get(&self, name: &str) -> Result<&Tensor, CheckpointError> {
        self.entries.get(name).ok_or(CheckpointError::MissingEntry {
            name: name.to_string(),
        })
    }

    pub fn get_scalar(&self, name: &str) -> Result<f64, CheckpointError> {
        Ok(self.get(name)?.as_scalar())
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn save(&self, path: &Path) -> Result<(), CheckpointError> {
        let err = |source| CheckpointError::Io {
            path: path.display().to_string(),
            source,
        };
        let mut w = BufWriter::new(File::create(path).map_err(err)?);
        let res: std::io::Result<()> = (|| {
            w.write_all(MAGIC)?;
            w.write_all(&VERSION.to_le_bytes())?;
            w.write_all(&(self.entries.len() as u64).to_le_bytes())?;
            for (name, t) in &self.entries {
                w.write_all(&(name.len() as u32).to_le_bytes())?;
                w.write_all(name.as_bytes())?;
                w.write_all(&(t.rows() as u64).to_le_bytes())?;
                w.write_all(&(t.cols() as u64).to_le_bytes())?;
                for v in t.data() {
                    w.write_all(&v.to_le_bytes())?;
                }
            }
            w.flush()
        })();
        res.map_err(err)
    }

    pub fn load(path: &Path) -> Result<Self, CheckpointError> {
        let path_str = path.display().to_string();
        let err = |source| CheckpointError::Io {
            path: path_str.clone(),
            source,
        };
        let mut r = BufReader::new(File::open(path).map_err(err)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic).map_err(err)?;
        if &magic != MAGIC {
            return Err(CheckpointError::BadMagic { path: path_str });
        }
        let version = read_u32(&mut r, &path_str)?;
        if version != VERSION {
            return Err(CheckpointError::BadVersion {
                path: path_str,
                version,
            });
        }
        let count = read_u64(&mut r, &path_str)?;
        let mut entries = BTreeMap::new();
        for _ in 0..count {
            let name_len = read_u32(&mut r, &path_str)? as usize;
            if name_len > 4096 {
                return Err(CheckpointError::Malformed {
                    path: path_str,
                    detail: format!("entry name of {name_len} bytes"),
                });
            }
            let mut name_bytes = vec![0u8; name_len];
            r.read_exact(&mut name_bytes).map_err(err)?;
            let name = String::from_utf8(name_bytes).map_err(|e| CheckpointError::Malformed {
                path: path_str.clone(),
                detail: e.to_string(),
            })?;
            let rows = read_u64(&mut r, &path_str)? as usize;
            let cols = read_u64(&mut r, &path_str)? as usize;
            let mut data = vec![0.0f64; rows * cols];
            for v in &mut data {
                let mut bytes = [0u8; 8];
                r.read_exact(&mut bytes).map_err(err)?;
                *v = f64::from_le_bytes(bytes);
            }
            entries.insert(name, Tensor::from_vec(rows, cols, data));
        }
        Ok(Checkpoint { entries })
    }
}

fn read_u32(r: &mut impl Read, path: &str) -> Result<u32, CheckpointError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b).map_err(|source| CheckpointError::Io {
        path: path.to_string(),
        source,
    })?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read, path: &str) -> Result<u64, CheckpointError> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b).map_err(|source| CheckpointError::Io {
        path: path.to_string(),
        source,
    })?;
    Ok(u64::from_le_bytes(b))
}
