//! Binary container for checkpoints and representation files.
//!
//! Layout (little-endian): magic `FDEN`, version byte 0x01, entry count
//! u32, then per entry: name length u32, UTF-8 name, rank u32, dims
//! u32[rank], payload f32[product(dims)].

use std::fs;
use std::path::Path;

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"FDEN";
pub const VERSION: u8 = 0x01;

/// One named f32 array inside a container.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dims: Vec<u32>,
    pub data: Vec<f32>,
}

impl Entry {
    pub fn from_tensor(name: impl Into<String>, t: &Tensor) -> Self {
        Entry {
            name: name.into(),
            dims: t.shape().iter().map(|&d| d as u32).collect(),
            data: t.data().iter().map(|&v| v as f32).collect(),
        }
    }

    pub fn scalar(name: impl Into<String>, value: f64) -> Self {
        Entry {
            name: name.into(),
            dims: vec![1],
            data: vec![value as f32],
        }
    }

    pub fn to_tensor(&self) -> Result<Tensor> {
        Tensor::from_vec(
            self.dims.iter().map(|&d| d as usize).collect(),
            self.data.iter().map(|&v| v as f64).collect(),
        )
    }

    pub fn numel(&self) -> usize {
        self.dims.iter().map(|&d| d as usize).product()
    }
}

pub fn to_bytes(entries: &[Entry]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for e in entries {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        out.extend_from_slice(&(e.dims.len() as u32).to_le_bytes());
        for &d in &e.dims {
            out.extend_from_slice(&d.to_le_bytes());
        }
        for &v in &e.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(CoreError::Format(format!(
                "truncated payload while reading {what} (need {n} bytes at offset {})",
                self.pos
            )));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<Vec<Entry>> {
    let mut r = Reader { bytes, pos: 0 };
    let magic = r.take(4, "magic")?;
    if magic != MAGIC {
        return Err(CoreError::Format(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let version = r.take(1, "version")?[0];
    if version != VERSION {
        return Err(CoreError::Format(format!(
            "unsupported version {version}, expected {VERSION}"
        )));
    }
    let count = r.u32("entry count")?;
    let mut entries = Vec::with_capacity(count as usize);
    for i in 0..count {
        let name_len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "name")?)
            .map_err(|_| CoreError::Format(format!("entry {i}: name is not UTF-8")))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.u32("dim")?);
        }
        let numel: usize = dims.iter().map(|&d| d as usize).product();
        let payload = r.take(numel * 4, "payload")?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        entries.push(Entry { name, dims, data });
    }
    if r.pos != bytes.len() {
        return Err(CoreError::Format(format!(
            "{} trailing bytes after last entry",
            bytes.len() - r.pos
        )));
    }
    Ok(entries)
}

pub fn write_file(path: impl AsRef<Path>, entries: &[Entry]) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, to_bytes(entries)).map_err(|e| CoreError::io(path.display().to_string(), e))
}

pub fn read_file(path: impl AsRef<Path>) -> Result<Vec<Entry>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| CoreError::io(path.display().to_string(), e))?;
    from_bytes(&bytes)
}

/// Lookup helper for loaders that require an entry to exist.
pub fn find<'a>(entries: &'a [Entry], name: &str) -> Result<&'a Entry> {
    entries
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| CoreError::Validation(format!("missing entry `{name}`")))
}
