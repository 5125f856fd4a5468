//! Binary checkpoint: `"IMCK"`, `u32` tensor count, then per tensor a `u32`
//! name length, the UTF-8 name, `u32` rows, `u32` cols and row-major
//! little-endian `f64` data.

use std::io::{Read, Write};
use std::path::Path;

use super::tensor::Tensor2;
use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"IMCK";

pub fn encode_checkpoint<'a>(
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor2)>,
) -> Vec<u8> {
    let tensors: Vec<_> = tensors.into_iter().collect();
    let mut buf = Vec::new();
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rows() as u32).to_le_bytes());
        buf.extend_from_slice(&(t.cols() as u32).to_le_bytes());
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    buf
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Parse {
                path: self.path.to_path_buf(),
                offset: self.pos as u64,
                message: format!("truncated while reading {what}"),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Vec<(String, Tensor2)>> {
    let mut cur = Cursor {
        bytes,
        pos: 0,
        path,
    };
    let magic = cur.take(4, "magic")?;
    if magic != CHECKPOINT_MAGIC {
        return Err(Error::VersionMismatch {
            path: path.to_path_buf(),
            found: String::from_utf8_lossy(magic).into_owned(),
            expected: "IMCK".into(),
        });
    }
    let count = cur.u32("tensor count")?;
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let name_len = cur.u32("name length")? as usize;
        let name_at = cur.pos;
        let name = std::str::from_utf8(cur.take(name_len, "name")?)
            .map_err(|e| Error::Parse {
                path: path.to_path_buf(),
                offset: name_at as u64,
                message: format!("tensor name is not UTF-8: {e}"),
            })?
            .to_owned();
        let rows = cur.u32("rows")? as usize;
        let cols = cur.u32("cols")? as usize;
        let raw = cur.take(rows * cols * 8, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor2::from_vec(rows, cols, data)?));
    }
    if cur.pos != bytes.len() {
        return Err(Error::Parse {
            path: path.to_path_buf(),
            offset: cur.pos as u64,
            message: "trailing bytes after last tensor".into(),
        });
    }
    Ok(out)
}

pub fn write_checkpoint<'a>(
    path: &Path,
    tensors: impl IntoIterator<Item = (&'a str, &'a Tensor2)>,
) -> Result<()> {
    let buf = encode_checkpoint(tensors);
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Vec<(String, Tensor2)>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
