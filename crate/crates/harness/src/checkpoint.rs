//! Binary checkpoints.
//!
//! Layout: `"MSGT"`, version `u32`, tensor count `u32`, then per tensor a
//! `u16` name length, the UTF-8 name, a `u8` rank, one `u32` per extent and
//! the values as 32-bit floats. All integers and floats are little-endian.

use std::fs;
use std::path::Path;

use msgt_core::arch::Model;
use msgt_core::Tensor;

use crate::error::{HarnessError, Result};

pub const MAGIC: &[u8; 4] = b"MSGT";
pub const VERSION: u32 = 1;

pub fn encode(model: &Model<f32>) -> Vec<u8> {
    let params = model.params();
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend(VERSION.to_le_bytes());
    out.extend((params.len() as u32).to_le_bytes());
    for p in params {
        let name = p.name.as_bytes();
        out.extend((name.len() as u16).to_le_bytes());
        out.extend_from_slice(name);
        out.push(p.tensor.rank() as u8);
        for &d in p.tensor.shape() {
            out.extend((d as u32).to_le_bytes());
        }
        for &v in p.tensor.data() {
            out.extend(v.to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            HarnessError::format(self.pos as u64, format!("file ends inside {what}"))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Decodes every named tensor; the header is checked before any tensor is read.
pub fn decode(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4, "the magic bytes")? != MAGIC {
        return Err(HarnessError::format(0, "not a checkpoint (bad magic bytes)"));
    }
    let version = c.u32("the version")?;
    if version != VERSION {
        return Err(HarnessError::format(4, format!("unsupported checkpoint version {version}")));
    }
    let count = c.u32("the tensor count")? as usize;
    let mut out = Vec::with_capacity(count.min(1 << 16));
    for i in 0..count {
        let at = c.pos as u64;
        let len = c.take(2, "a name length")?;
        let len = u16::from_le_bytes([len[0], len[1]]) as usize;
        let name = std::str::from_utf8(c.take(len, "a tensor name")?)
            .map_err(|_| HarnessError::format(at + 2, format!("tensor {i} name is not UTF-8")))?
            .to_string();
        let rank = c.take(1, "a rank")?[0] as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(c.u32(&format!("the extents of {name:?}"))? as usize);
        }
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let bytes_needed = numel.and_then(|n| n.checked_mul(4)).ok_or_else(|| {
            HarnessError::format(at, format!("tensor {name:?} extents {shape:?} overflow"))
        })?;
        let raw = c.take(bytes_needed, &format!("the values of {name:?}"))?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        let tensor = Tensor::new(&shape, data).map_err(|e| HarnessError::format(at, format!("{name:?}: {e}")))?;
        out.push((name, tensor));
    }
    if c.pos != bytes.len() {
        return Err(HarnessError::format(c.pos as u64, "trailing bytes after the last tensor"));
    }
    Ok(out)
}

pub fn save(model: &Model<f32>, path: &Path) -> Result<()> {
    fs::write(path, encode(model)).map_err(HarnessError::io(path))
}

/// Loads values into `model`, validating names and shapes against its configuration.
pub fn load_into(model: &mut Model<f32>, path: &Path) -> Result<()> {
    let bytes = fs::read(path).map_err(HarnessError::io(path))?;
    model.load_tensors(decode(&bytes)?)?;
    Ok(())
}
