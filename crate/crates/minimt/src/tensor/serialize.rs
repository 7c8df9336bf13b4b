//! Named-tensor file container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"MNMT"
//! version u32            (currently 1)
//! count   u32            number of entries
//! entry*  name_len u32, name bytes (UTF-8),
//!         rank u32, dims u64 × rank,
//!         dtype u8 (0 = f32, 1 = f64, 2 = i32),
//!         payload (dims product × element size)
//! digest  sha256 of every preceding byte (32 bytes)
//! ```
//!
//! The trailing digest makes torn or bit-rotted files fail loudly instead of
//! producing silently wrong weights.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::util;

pub const MAGIC: &[u8; 4] = b"MNMT";
pub const VERSION: u32 = 1;

/// One named tensor in a container file.
#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub shape: Vec<usize>,
    pub payload: Payload,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
}

impl Payload {
    fn dtype_tag(&self) -> u8 {
        match self {
            Payload::F32(_) => 0,
            Payload::F64(_) => 1,
            Payload::I32(_) => 2,
        }
    }

    fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
            Payload::I32(v) => v.len(),
        }
    }
}

impl Entry {
    /// Full-precision entry from a tensor.
    pub fn from_tensor(name: impl Into<String>, t: &Tensor) -> Self {
        Entry { name: name.into(), shape: t.shape().to_vec(), payload: Payload::F64(t.data().to_vec()) }
    }

    /// Converts back to a tensor. f32 payloads widen losslessly; integer
    /// payloads are not tensors and are rejected.
    pub fn to_tensor(&self) -> Result<Tensor> {
        let data = match &self.payload {
            Payload::F64(v) => v.clone(),
            Payload::F32(v) => v.iter().map(|&x| x as f64).collect(),
            Payload::I32(_) => {
                return Err(Error::Checkpoint(format!("tensor '{}' has integer payload", self.name)))
            }
        };
        Tensor::new(self.shape.clone(), data)
    }
}

/// Serializes `entries` and writes them atomically to `path`.
pub fn write_tensors(path: &Path, entries: &[Entry]) -> Result<()> {
    let bytes = to_bytes(entries)?;
    util::atomic_write(path, &bytes)
}

/// Reads and verifies a container file.
pub fn read_tensors(path: &Path) -> Result<Vec<Entry>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes).map_err(|e| match e {
        Error::Checkpoint(msg) => Error::Checkpoint(format!("{}: {msg}", path.display())),
        Error::Checksum(msg) => Error::Checksum(format!("{}: {msg}", path.display())),
        other => other,
    })
}

pub fn to_bytes(entries: &[Entry]) -> Result<Vec<u8>> {
    let count = u32::try_from(entries.len())
        .map_err(|_| Error::Checkpoint(format!("{} entries exceed container limit", entries.len())))?;
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&count.to_le_bytes());
    for e in entries {
        let expected: usize = e.shape.iter().product();
        if expected != e.payload.len() {
            return Err(Error::Checkpoint(format!(
                "tensor '{}': shape {:?} wants {expected} elements, payload has {}",
                e.name,
                e.shape,
                e.payload.len()
            )));
        }
        let name_bytes = e.name.as_bytes();
        out.extend_from_slice(&(name_bytes.len() as u32).to_le_bytes());
        out.extend_from_slice(name_bytes);
        out.extend_from_slice(&(e.shape.len() as u32).to_le_bytes());
        for &d in &e.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        out.push(e.payload.dtype_tag());
        match &e.payload {
            Payload::F32(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            Payload::F64(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
            Payload::I32(v) => {
                for x in v {
                    out.extend_from_slice(&x.to_le_bytes());
                }
            }
        }
    }
    let digest = Sha256::digest(&out);
    out.extend_from_slice(&digest);
    Ok(out)
}

pub fn from_bytes(bytes: &[u8]) -> Result<Vec<Entry>> {
    if bytes.len() < MAGIC.len() + 8 + 32 {
        return Err(Error::Checkpoint("container too short".into()));
    }
    let (body, digest) = bytes.split_at(bytes.len() - 32);
    let expected = Sha256::digest(body);
    if digest != expected.as_slice() {
        return Err(Error::Checksum("container digest mismatch".into()));
    }
    let mut cur = Cursor { buf: body, pos: 0 };
    let magic = cur.take(4)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic {magic:02x?}")));
    }
    let version = cur.u32()?;
    if version != VERSION {
        return Err(Error::Version { expected: VERSION, found: version });
    }
    let count = cur.u32()? as usize;
    let mut entries = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = cur.u32()? as usize;
        let name = String::from_utf8(cur.take(name_len)?.to_vec())
            .map_err(|e| Error::Checkpoint(format!("tensor name not UTF-8: {e}")))?;
        let rank = cur.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let tag = cur.take(1)?[0];
        let payload = match tag {
            0 => {
                let raw = cur.take(n * 4)?;
                Payload::F32(raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
            }
            1 => {
                let raw = cur.take(n * 8)?;
                Payload::F64(raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
            }
            2 => {
                let raw = cur.take(n * 4)?;
                Payload::I32(raw.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect())
            }
            t => return Err(Error::Checkpoint(format!("tensor '{name}': unknown dtype tag {t}"))),
        };
        entries.push(Entry { name, shape, payload });
    }
    if cur.pos != body.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes after last entry", body.len() - cur.pos)));
    }
    Ok(entries)
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("container truncated".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}
