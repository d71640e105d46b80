//! Little-endian named-tensor container shared by feature caches and
//! checkpoints.
//!
//! ```text
//! magic        8 bytes
//! version      u32 (= 1)
//! entry count  u32
//! per entry:   u32 name length, UTF-8 name, u8 dtype (1 = f32, 2 = f64),
//!              u8 ndim, u32 dims[ndim], raw data
//! optional:    u32 trailer length, trailer bytes
//! ```

use std::fs;
use std::io::{self, Write};
use std::path::Path;

use thiserror::Error;

pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 1;
pub const DTYPE_F64: u8 = 2;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ContainerError {
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: String },
    #[error("unsupported version {0}")]
    BadVersion(u32),
    #[error("truncated at byte {0}")]
    Truncated(usize),
    #[error("unknown dtype tag {0}")]
    BadDtype(u8),
    #[error("entry name is not UTF-8")]
    BadName,
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl TensorData {
    pub fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: TensorData,
}

impl Entry {
    pub fn f32(name: impl Into<String>, dims: &[usize], data: Vec<f32>) -> Self {
        Self {
            name: name.into(),
            dims: dims.iter().map(|&d| d as u32).collect(),
            data: TensorData::F32(data),
        }
    }

    pub fn f64(name: impl Into<String>, dims: &[usize], data: Vec<f64>) -> Self {
        Self {
            name: name.into(),
            dims: dims.iter().map(|&d| d as u32).collect(),
            data: TensorData::F64(data),
        }
    }

    pub fn shape(&self) -> Vec<usize> {
        self.dims.iter().map(|&d| d as usize).collect()
    }
}

pub fn encode(magic: &[u8; 8], entries: &[Entry], trailer: Option<&[u8]>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(magic);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        match &e.data {
            TensorData::F32(_) => out.push(DTYPE_F32),
            TensorData::F64(_) => out.push(DTYPE_F64),
        }
        out.push(e.dims.len() as u8);
        for d in &e.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        match &e.data {
            TensorData::F32(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
            TensorData::F64(v) => v
                .iter()
                .for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
        }
    }
    if let Some(t) = trailer {
        out.extend_from_slice(&(t.len() as u32).to_le_bytes());
        out.extend_from_slice(t);
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], ContainerError> {
        let end = self
            .pos
            .checked_add(n)
            .ok_or(ContainerError::Truncated(self.pos))?;
        if end > self.bytes.len() {
            return Err(ContainerError::Truncated(self.pos));
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, ContainerError> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32, ContainerError> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

/// Decode a container; returns its entries and optional trailer.
pub fn decode(
    magic: &[u8; 8],
    bytes: &[u8],
) -> Result<(Vec<Entry>, Option<Vec<u8>>), ContainerError> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(8).ok() != Some(&magic[..]) {
        return Err(ContainerError::BadMagic {
            expected: String::from_utf8_lossy(magic).into_owned(),
        });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(ContainerError::BadVersion(version));
    }
    let count = r.u32()? as usize;
    let mut entries = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| ContainerError::BadName)?
            .to_string();
        let dtype = r.u8()?;
        let ndim = r.u8()? as usize;
        let dims: Vec<u32> = (0..ndim).map(|_| r.u32()).collect::<Result<_, _>>()?;
        let numel = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d as usize));
        let numel = numel.ok_or(ContainerError::Truncated(r.pos))?;
        let data = match dtype {
            DTYPE_F32 => {
                let raw = r.take(
                    numel
                        .checked_mul(4)
                        .ok_or(ContainerError::Truncated(r.pos))?,
                )?;
                TensorData::F32(
                    raw.chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
            DTYPE_F64 => {
                let raw = r.take(
                    numel
                        .checked_mul(8)
                        .ok_or(ContainerError::Truncated(r.pos))?,
                )?;
                TensorData::F64(
                    raw.chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                )
            }
            other => return Err(ContainerError::BadDtype(other)),
        };
        entries.push(Entry { name, dims, data });
    }
    let trailer = if r.pos == bytes.len() {
        None
    } else {
        let len = r.u32()? as usize;
        let t = r.take(len)?.to_vec();
        if r.pos != bytes.len() {
            return Err(ContainerError::TrailingBytes(bytes.len() - r.pos));
        }
        Some(t)
    };
    Ok((entries, trailer))
}

/// Write via a temporary sibling file and rename, so readers never see a
/// partial file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> io::Result<()> {
    let dir = path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .unwrap_or(Path::new("."));
    fs::create_dir_all(dir)?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)
}
