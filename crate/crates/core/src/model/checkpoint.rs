//! Binary checkpoint container.
//!
//! Layout, little-endian throughout: magic `RAPC`, `u32` version, `u32`
//! byte length plus UTF-8 JSON configuration, `u32` parameter count, then
//! per parameter `u32` name length, name bytes, `u32` rank, `u32` extents
//! and the `f64` payload.

use std::path::Path;

use rapnet_tensor::Tensor;

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"RAPC";
pub const CHECKPOINT_VERSION: u32 = 1;

fn put_u32(out: &mut Vec<u8>, v: usize) -> Result<()> {
    let v = u32::try_from(v).map_err(|_| Error::contract("encode_checkpoint", format!("{v} does not fit in u32")))?;
    out.extend_from_slice(&v.to_le_bytes());
    Ok(())
}

pub fn encode_checkpoint<'a>(
    config: &serde_json::Value,
    params: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<Vec<u8>> {
    let params: Vec<_> = params.into_iter().collect();
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let json = serde_json::to_vec(config).map_err(|e| Error::contract("encode_checkpoint", e.to_string()))?;
    put_u32(&mut out, json.len())?;
    out.extend_from_slice(&json);
    put_u32(&mut out, params.len())?;
    for (name, value) in params {
        put_u32(&mut out, name.len())?;
        out.extend_from_slice(name.as_bytes());
        put_u32(&mut out, value.rank())?;
        for &d in value.shape() {
            put_u32(&mut out, d)?;
        }
        for v in value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn fail<T>(&self, msg: impl Into<String>) -> Result<T> {
        Err(Error::Format {
            path: self.path.to_path_buf(),
            offset: self.pos as u64,
            msg: msg.into(),
        })
    }

    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return self.fail(format!("truncated: need {n} more bytes"));
        }
        let slice = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(slice)
    }

    fn u32(&mut self) -> Result<usize> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes(b.try_into().expect("4 bytes")) as usize)
    }
}

/// Parses checkpoint bytes; `path` is used for error messages only.
pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(4)? != CHECKPOINT_MAGIC {
        r.pos = 0;
        return r.fail("bad magic, not a checkpoint");
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION as usize {
        return r.fail(format!("unsupported version {version}"));
    }
    let len = r.u32()?;
    let config = serde_json::from_slice(r.take(len)?);
    let config = match config {
        Ok(c) => c,
        Err(e) => return r.fail(format!("configuration blob: {e}")),
    };
    let count = r.u32()?;
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let len = r.u32()?;
        let name = match String::from_utf8(r.take(len)?.to_vec()) {
            Ok(n) => n,
            Err(_) => return r.fail("parameter name is not UTF-8"),
        };
        let rank = r.u32()?;
        let shape = (0..rank).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let payload = r.take(numel.checked_mul(8).unwrap_or(usize::MAX))?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        match Tensor::new(shape, data) {
            Ok(t) => params.push((name, t)),
            Err(e) => return r.fail(format!("parameter {name}: {e}")),
        }
    }
    if r.pos != bytes.len() {
        return r.fail("trailing bytes after last parameter");
    }
    Ok((config, params))
}

pub fn write_checkpoint<'a>(
    path: impl AsRef<Path>,
    config: &serde_json::Value,
    params: impl IntoIterator<Item = (&'a str, &'a Tensor)>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_checkpoint(config, params)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<(serde_json::Value, Vec<(String, Tensor)>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
