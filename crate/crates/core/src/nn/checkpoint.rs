//! Single-file parameter container.
//!
//! Layout, all little-endian: magic `BVSGCKPT`, `u32` version, `u32`
//! metadata length and UTF-8 metadata text, `u32` tensor count, then per
//! tensor `u32` name length, name, `u8` kind, `u32` rank, `u64` extents
//! and `f32` values.

use std::path::Path;

use super::params::{Kind, Params};
use super::Tensor;
use crate::{Error, Result};

const MAGIC: &[u8; 8] = b"BVSGCKPT";
pub const VERSION: u32 = 1;

/// Encodes `params` and free-form `meta` text.
pub fn encode(params: &Params, meta: &str) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(meta.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, kind, t) in params.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(match kind {
            Kind::Param => 0,
            Kind::Buffer => 1,
        });
        out.extend_from_slice(&(t.ndim() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Format(format!("checkpoint truncated at byte {}", self.pos)));
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

    fn text(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| Error::Format("checkpoint text is not UTF-8".into()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<(Params, String)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Format("not a checkpoint file".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {version}")));
    }
    let meta = r.text()?;
    let count = r.u32()?;
    let mut params = Params::new();
    for _ in 0..count {
        let name = r.text()?;
        let kind = match r.take(1)?[0] {
            0 => Kind::Param,
            1 => Kind::Buffer,
            k => return Err(Error::Format(format!("tensor `{name}` has unknown kind {k}"))),
        };
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64()? as usize);
        }
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(4).ok_or_else(|| Error::Format("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        params.insert(name, kind, Tensor::new(&shape, data)?);
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after checkpoint".into()));
    }
    Ok((params, meta))
}

pub fn save(path: &Path, params: &Params, meta: &str) -> Result<()> {
    std::fs::write(path, encode(params, meta)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<(Params, String)> {
    decode(&std::fs::read(path).map_err(|e| Error::io(path, e))?)
}
