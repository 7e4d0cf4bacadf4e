//! Parameter checkpoints.
//!
//! ```text
//! "DTMN"  u32 version (= 1)
//! per parameter, in lexicographic name order:
//!   u32 name length, name bytes (UTF-8), u32 rank, u32 dims[rank],
//!   f64 values[product(dims)]
//! ```
//!
//! All integers and floats are little-endian. The file ends after the last
//! parameter.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const MAGIC: &[u8; 4] = b"DTMN";
pub const VERSION: u32 = 1;

pub fn encode(params: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.dims() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                path: self.path.to_path_buf(),
                offset: self.pos,
                message: format!("truncated {what}"),
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

/// Parses checkpoint bytes. `path` only labels errors.
pub fn decode(bytes: &[u8], path: &Path) -> Result<ParamStore> {
    let mut rd = Reader {
        bytes,
        pos: 0,
        path,
    };
    if rd.take(4, "magic").ok() != Some(MAGIC.as_slice()) {
        return Err(Error::CheckpointMismatch(format!(
            "{} is not a checkpoint (bad magic)",
            path.display()
        )));
    }
    let version = rd.u32("version")?;
    if version != VERSION {
        return Err(Error::CheckpointMismatch(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let mut params = ParamStore::new();
    while rd.pos < bytes.len() {
        let start = rd.pos;
        let len = rd.u32("name length")? as usize;
        let name = std::str::from_utf8(rd.take(len, "name")?)
            .map_err(|_| Error::Format {
                path: path.to_path_buf(),
                offset: start + 4,
                message: "parameter name is not UTF-8".into(),
            })?
            .to_string();
        let rank = rd.u32("rank")? as usize;
        let dims = (0..rank)
            .map(|_| rd.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let count = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .filter(|c| c.checked_mul(8).is_some())
            .ok_or_else(|| Error::Format {
                path: path.to_path_buf(),
                offset: start,
                message: format!("parameter {name} is too large"),
            })?;
        let raw = rd.take(count * 8, "values")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        if let Some(prev) = params.keys().next_back() {
            if prev.as_str() >= name.as_str() {
                return Err(Error::Format {
                    path: path.to_path_buf(),
                    offset: start,
                    message: format!("parameter {name} out of order"),
                });
            }
        }
        params.insert(name, Tensor::new(dims, data)?);
    }
    Ok(params)
}

pub fn save(path: &Path, params: &ParamStore) -> Result<()> {
    crate::data::write_atomic(path, &encode(params))
}

pub fn load(path: &Path) -> Result<ParamStore> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes, path)
}
