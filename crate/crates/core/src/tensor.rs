//! The `AVTC` binary tensor container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size  field
//! 0       4     magic "AVTC"
//! 4       4     format version (u32, currently 1)
//! 8       4     tensor count n (u32)
//! 12      4     reserved, zero
//! 16      ..    n directory entries:
//!                 u32 name length, name bytes (UTF-8)
//!                 u8 dtype (0 = f32), u8 rank, u16 zero
//!                 u64 x rank dimensions
//!                 u64 payload offset from file start (multiple of 8)
//!                 u64 payload length in bytes
//!                 32-byte SHA-256 of the payload
//! ..      ..    zero padding to an 8-byte boundary, then each payload in
//!               directory order, each followed by zero padding to 8 bytes
//! ```
//!
//! Writing is deterministic, so write -> read -> write is byte-identical.

use std::collections::HashSet;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"AVTC";
pub const VERSION: u32 = 1;
const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f32] {
        let cols = self.shape.get(1).copied().unwrap_or(self.data.len());
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| v as f64).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorContainer {
    tensors: Vec<Tensor>,
}

fn align8(n: usize) -> usize {
    (n + 7) & !7
}

fn checksum(bytes: &[u8]) -> [u8; 32] {
    Sha256::digest(bytes).into()
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::CorruptContainer("truncated directory".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

impl TensorContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: Vec<f32>) -> Result<()> {
        let name = name.into();
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "tensor '{name}': shape {shape:?} holds {expected} values, got {}",
                data.len()
            )));
        }
        if self.get(&name).is_some() {
            return Err(Error::Shape(format!("duplicate tensor name '{name}'")));
        }
        self.tensors.push(Tensor { name, shape, data });
        Ok(())
    }

    pub fn push_f64(&mut self, name: impl Into<String>, shape: Vec<usize>, data: &[f64]) -> Result<()> {
        self.push(name, shape, data.iter().map(|&v| v as f32).collect())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::CorruptContainer(format!("missing tensor '{name}'")))
    }

    pub fn tensors(&self) -> &[Tensor] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut dir_len = 16;
        for t in &self.tensors {
            dir_len += 4 + t.name.len() + 4 + 8 * t.shape.len() + 8 + 8 + 32;
        }
        let mut offset = align8(dir_len);
        let mut offsets = Vec::with_capacity(self.tensors.len());
        for t in &self.tensors {
            offsets.push(offset);
            offset = align8(offset + 4 * t.data.len());
        }
        let total = offset;

        let mut out = Vec::with_capacity(total);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        out.extend_from_slice(&0u32.to_le_bytes());
        let payloads: Vec<Vec<u8>> = self
            .tensors
            .iter()
            .map(|t| t.data.iter().flat_map(|v| v.to_le_bytes()).collect())
            .collect();
        for ((t, &off), payload) in self.tensors.iter().zip(&offsets).zip(&payloads) {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(DTYPE_F32);
            out.push(t.shape.len() as u8);
            out.extend_from_slice(&0u16.to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&(off as u64).to_le_bytes());
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&checksum(payload));
        }
        for (&off, payload) in offsets.iter().zip(&payloads) {
            out.resize(off, 0);
            out.extend_from_slice(payload);
        }
        out.resize(total, 0);
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::CorruptContainer("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::CorruptContainer(format!("unsupported version {version}")));
        }
        let n = r.u32()? as usize;
        let _reserved = r.u32()?;

        struct Entry {
            name: String,
            shape: Vec<usize>,
            offset: usize,
            len: usize,
            sum: [u8; 32],
        }
        let mut entries = Vec::with_capacity(n);
        let mut names = HashSet::new();
        for _ in 0..n {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::CorruptContainer("tensor name is not UTF-8".into()))?
                .to_string();
            if r.u8()? != DTYPE_F32 {
                return Err(Error::CorruptContainer(format!("tensor '{name}': unsupported dtype")));
            }
            let rank = r.u8()? as usize;
            let _pad = r.u16()?;
            let shape = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            let offset = r.u64()? as usize;
            let len = r.u64()? as usize;
            let sum: [u8; 32] = r.take(32)?.try_into().unwrap();
            if !names.insert(name.clone()) {
                return Err(Error::CorruptContainer(format!("duplicate tensor '{name}'")));
            }
            entries.push(Entry { name, shape, offset, len, sum });
        }

        let mut spans: Vec<(usize, usize, &str)> = Vec::with_capacity(n);
        for e in &entries {
            let values: usize = e.shape.iter().product();
            if e.len != 4 * values {
                return Err(Error::CorruptContainer(format!(
                    "tensor '{}': length {} does not match shape {:?}",
                    e.name, e.len, e.shape
                )));
            }
            if e.offset % 8 != 0 || e.offset < r.pos || e.offset + e.len > buf.len() {
                return Err(Error::CorruptContainer(format!("tensor '{}': bad offset", e.name)));
            }
            spans.push((e.offset, e.offset + e.len, &e.name));
        }
        spans.sort();
        for w in spans.windows(2) {
            if w[0].1 > w[1].0 {
                return Err(Error::CorruptContainer(format!(
                    "tensors '{}' and '{}' overlap",
                    w[0].2, w[1].2
                )));
            }
        }

        let mut tensors = Vec::with_capacity(n);
        for e in entries {
            let payload = &buf[e.offset..e.offset + e.len];
            if checksum(payload) != e.sum {
                return Err(Error::Checksum(e.name));
            }
            let data = payload
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect();
            tensors.push(Tensor {
                name: e.name,
                shape: e.shape,
                data,
            });
        }
        Ok(TensorContainer { tensors })
    }

    pub fn write(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        if !path.exists() {
            return Err(Error::MissingArtifact(path.to_path_buf()));
        }
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}
