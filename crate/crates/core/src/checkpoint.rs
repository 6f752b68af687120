//! Versioned binary checkpoint blobs.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes   b"LFCK"
//! version    u32       currently 1
//! kind_len   u32       then `kind_len` UTF-8 bytes naming the payload kind
//! n_meta     u32       then n_meta entries of: key_len u32, key bytes, value f64
//! n_tensors  u32       then n_tensors entries of:
//!            name_len u32, name bytes, rows u64, cols u64, rows*cols f64 values
//! ```

use std::io::{Read, Write};

use thiserror::Error;

use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"LFCK";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic)")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checkpoint holds `{found}`, expected `{expected}`")]
    Kind { expected: String, found: String },
    #[error("checkpoint is missing `{0}`")]
    Missing(String),
    #[error("`{name}` has shape {found:?}, expected {expected:?}")]
    Shape {
        name: String,
        expected: [usize; 2],
        found: [usize; 2],
    },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
}

/// Decoded checkpoint contents.
#[derive(Debug, Clone, PartialEq)]
pub struct Blob {
    pub kind: String,
    pub meta: Vec<(String, f64)>,
    pub tensors: Vec<(String, Tensor)>,
}

impl Blob {
    pub fn new(kind: impl Into<String>) -> Self {
        Self {
            kind: kind.into(),
            meta: Vec::new(),
            tensors: Vec::new(),
        }
    }

    pub fn meta(&self, key: &str) -> Result<f64, CheckpointError> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| CheckpointError::Missing(key.to_string()))
    }

    pub fn tensor(&self, name: &str) -> Result<&Tensor, CheckpointError> {
        self.tensors
            .iter()
            .find(|(k, _)| k == name)
            .map(|(_, t)| t)
            .ok_or_else(|| CheckpointError::Missing(name.to_string()))
    }

    pub fn expect_kind(&self, kind: &str) -> Result<(), CheckpointError> {
        if self.kind != kind {
            return Err(CheckpointError::Kind {
                expected: kind.to_string(),
                found: self.kind.clone(),
            });
        }
        Ok(())
    }

    pub fn write(&self, w: &mut impl Write) -> Result<(), CheckpointError> {
        w.write_all(MAGIC)?;
        w.write_all(&VERSION.to_le_bytes())?;
        write_str(w, &self.kind)?;
        w.write_all(&(self.meta.len() as u32).to_le_bytes())?;
        for (k, v) in &self.meta {
            write_str(w, k)?;
            w.write_all(&v.to_le_bytes())?;
        }
        w.write_all(&(self.tensors.len() as u32).to_le_bytes())?;
        for (name, t) in &self.tensors {
            write_str(w, name)?;
            w.write_all(&(t.rows() as u64).to_le_bytes())?;
            w.write_all(&(t.cols() as u64).to_le_bytes())?;
            for v in t.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read(r: &mut impl Read) -> Result<Self, CheckpointError> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(CheckpointError::Magic);
        }
        let version = read_u32(r)?;
        if version != VERSION {
            return Err(CheckpointError::Version(version));
        }
        let kind = read_str(r)?;
        let n_meta = read_u32(r)?;
        let mut meta = Vec::new();
        for _ in 0..n_meta {
            let k = read_str(r)?;
            meta.push((k, read_f64(r)?));
        }
        let n_tensors = read_u32(r)?;
        let mut tensors = Vec::new();
        for _ in 0..n_tensors {
            let name = read_str(r)?;
            let rows = read_u64(r)?;
            let cols = read_u64(r)?;
            let too_large = || CheckpointError::Corrupt(format!("`{name}` is implausibly large"));
            let n = rows
                .checked_mul(cols)
                .filter(|n| *n <= 1 << 32)
                .and_then(|n| usize::try_from(n).ok())
                .ok_or_else(too_large)?;
            let rows = usize::try_from(rows).map_err(|_| too_large())?;
            let cols = usize::try_from(cols).map_err(|_| too_large())?;
            let mut data = Vec::with_capacity(n);
            for _ in 0..n {
                data.push(read_f64(r)?);
            }
            let t = Tensor::from_vec([rows, cols], data).map_err(|e| CheckpointError::Corrupt(e.to_string()))?;
            tensors.push((name, t));
        }
        Ok(Self { kind, meta, tensors })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write(&mut out).expect("writing to a Vec cannot fail");
        out
    }
}

fn write_str(w: &mut impl Write, s: &str) -> std::io::Result<()> {
    w.write_all(&(s.len() as u32).to_le_bytes())?;
    w.write_all(s.as_bytes())
}

fn read_u32(r: &mut impl Read) -> std::io::Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

fn read_u64(r: &mut impl Read) -> std::io::Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

fn read_f64(r: &mut impl Read) -> std::io::Result<f64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(f64::from_le_bytes(b))
}

fn read_str(r: &mut impl Read) -> Result<String, CheckpointError> {
    let n = read_u32(r)? as usize;
    if n > 1 << 20 {
        return Err(CheckpointError::Corrupt("string length".into()));
    }
    let mut b = vec![0u8; n];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|e| CheckpointError::Corrupt(e.to_string()))
}
