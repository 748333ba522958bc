//! Binary parameter container shared by enhancement and encoder checkpoints.
//!
//! Layout, all integers little-endian `u32`:
//!
//! ```text
//! magic        4 bytes   b"DCE1" or b"ENC1"
//! version      u32       currently 1
//! config_len   u32       byte length of the UTF-8 JSON config block
//! config       bytes
//! n_tensors    u32
//! per tensor:
//!   name_len   u32
//!   name       bytes (UTF-8)
//!   ndim       u32
//!   dims       ndim x u32
//!   values     prod(dims) x f32 little-endian
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::nn::{NamedTensor, ParamSet};

pub const FORMAT_VERSION: u32 = 1;

pub fn encode(magic: &[u8; 4], config_json: &str, params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + config_json.len() + 4 * params.num_values());
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(config_json.len() as u32).to_le_bytes());
    out.extend_from_slice(config_json.as_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for t in &params.tensors {
        out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
        out.extend_from_slice(t.name.as_bytes());
        out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
        for &d in &t.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in &t.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint("unexpected end of file".into()))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn string(&mut self, n: usize) -> Result<String> {
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid UTF-8".into()))
    }
}

/// Parses a container, returning the config JSON and the tensors.
pub fn decode(magic: &[u8; 4], bytes: &[u8]) -> Result<(String, ParamSet)> {
    let mut cur = Cursor { bytes, pos: 0 };
    let found = cur.take(4)?;
    if found != magic {
        return Err(Error::Checkpoint(format!(
            "bad magic {:?}, expected {:?}",
            String::from_utf8_lossy(found),
            String::from_utf8_lossy(magic)
        )));
    }
    let version = cur.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}")));
    }
    let config_len = cur.u32()? as usize;
    let config = cur.string(config_len)?;
    let n = cur.u32()? as usize;
    let mut params = ParamSet::default();
    for _ in 0..n {
        let name_len = cur.u32()? as usize;
        let name = cur.string(name_len)?;
        let ndim = cur.u32()? as usize;
        let shape = (0..ndim)
            .map(|_| cur.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count: usize = shape.iter().product();
        let raw = cur.take(count.checked_mul(4).ok_or_else(|| {
            Error::Checkpoint("tensor size overflow".into())
        })?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes([c[0], c[1], c[2], c[3]])))
            .collect();
        params.push(NamedTensor { name, shape, data });
    }
    if cur.pos != bytes.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes",
            bytes.len() - cur.pos
        )));
    }
    Ok((config, params))
}

pub fn write_file(path: &Path, magic: &[u8; 4], config_json: &str, params: &ParamSet) -> Result<()> {
    let bytes = encode(magic, config_json, params);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&bytes).map_err(|e| Error::io(path, e))
}

pub fn read_file(path: &Path, magic: &[u8; 4]) -> Result<(String, ParamSet)> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(magic, &bytes)
}
