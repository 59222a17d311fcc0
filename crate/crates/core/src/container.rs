//! `RV2N` binary tensor container, shared by clips, flow caches and
//! parameter checkpoints.
//!
//! Layout (little-endian):
//!
//! ```text
//! "RV2N" | version: u8 | rank: u32 | extents: rank x u32 | dtype: u8
//!        | payload: prod(extents) x sizeof(dtype) | meta_len: u32 | meta: UTF-8 JSON
//! ```
//!
//! dtype 0 is f32, dtype 1 is f64. The file must end exactly after the
//! metadata blob.

use std::fs;
use std::path::Path;

use serde_json::Value;

use crate::element::Element;
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"RV2N";
pub const VERSION: u8 = 1;
const MAX_RANK: usize = 8;

#[derive(Debug, Clone, PartialEq)]
pub struct Container<T> {
    pub dims: Vec<usize>,
    pub data: Vec<T>,
    pub metadata: Value,
}

pub fn encode<T: Element>(dims: &[usize], data: &[T], metadata: &Value) -> Result<Vec<u8>> {
    let numel: usize = dims.iter().product();
    if dims.is_empty() || dims.len() > MAX_RANK || numel != data.len() {
        return Err(Error::shape(format!(
            "cannot encode {} values with extents {dims:?}",
            data.len()
        )));
    }
    let meta = serde_json::to_vec(metadata)?;
    let mut out = Vec::with_capacity(16 + 4 * dims.len() + data.len() * T::BYTES + meta.len());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
    for &d in dims {
        let d = u32::try_from(d).map_err(|_| Error::shape(format!("extent {d} exceeds u32")))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    out.push(T::DTYPE_TAG);
    for &v in data {
        v.write_le(&mut out);
    }
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &'static str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::format(
                    field,
                    format!(
                        "truncated: need {n} bytes at offset {}, file has {}",
                        self.pos,
                        self.bytes.len()
                    ),
                )
            })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, field: &'static str) -> Result<u32> {
        let b = self.take(4, field)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Decodes a container, converting the stored element type to `T`.
pub fn decode<T: Element>(bytes: &[u8]) -> Result<Container<T>> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::format("magic", "expected \"RV2N\""));
    }
    let version = r.take(1, "version")?[0];
    if version != VERSION {
        return Err(Error::format("version", format!("unsupported version {version}")));
    }
    let rank = r.u32("rank")? as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(Error::format("rank", format!("rank {rank} outside 1..={MAX_RANK}")));
    }
    let mut dims = Vec::with_capacity(rank);
    let mut numel: usize = 1;
    for _ in 0..rank {
        let d = r.u32("extents")? as usize;
        if d == 0 {
            return Err(Error::format("extents", "zero extent"));
        }
        numel = numel
            .checked_mul(d)
            .ok_or_else(|| Error::format("extents", "element count overflows"))?;
        dims.push(d);
    }
    let dtype = r.take(1, "dtype")?[0];
    let width = match dtype {
        0 => 4,
        1 => 8,
        other => return Err(Error::format("dtype", format!("unknown dtype tag {other}"))),
    };
    let payload_len = numel
        .checked_mul(width)
        .ok_or_else(|| Error::format("extents", "payload size overflows"))?;
    if payload_len > bytes.len().saturating_sub(r.pos) {
        return Err(Error::format(
            "payload",
            format!(
                "header declares {payload_len} payload bytes, only {} remain",
                bytes.len() - r.pos
            ),
        ));
    }
    let payload = r.take(payload_len, "payload")?;
    let data: Vec<T> = match dtype {
        0 => payload.chunks_exact(4).map(|c| T::of(f32::read_le(c) as f64)).collect(),
        _ => payload.chunks_exact(8).map(|c| T::of(f64::read_le(c))).collect(),
    };
    let meta_len = r.u32("metadata_len")? as usize;
    let meta = r.take(meta_len, "metadata")?;
    if r.pos != bytes.len() {
        return Err(Error::format(
            "payload",
            format!("{} trailing bytes after metadata", bytes.len() - r.pos),
        ));
    }
    let text = std::str::from_utf8(meta).map_err(|e| Error::format("metadata", e.to_string()))?;
    let metadata =
        serde_json::from_str(text).map_err(|e| Error::format("metadata", e.to_string()))?;
    Ok(Container {
        dims,
        data,
        metadata,
    })
}

pub fn write_file<T: Element>(
    path: &Path,
    dims: &[usize],
    data: &[T],
    metadata: &Value,
) -> Result<()> {
    let bytes = encode(dims, data, metadata)?;
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file<T: Element>(path: &Path) -> Result<Container<T>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
