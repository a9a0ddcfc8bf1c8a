//! Binary tensor-bundle files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  "DFMLTB01"
//! count    u32
//! repeated count times:
//!   name_len u32, name (UTF-8)
//!   rank     u32, dims (u64 each)
//!   data     f64 x product(dims)
//! ```
//!
//! Values are stored as raw IEEE-754 bits, so a save/load round trip is exact.

use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::nn::ParamBundle;
use crate::tensor::Array;

pub const MAGIC: &[u8; 8] = b"DFMLTB01";

pub fn encode(bundle: &ParamBundle) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + bundle.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(bundle.len() as u32).to_le_bytes());
    for (name, a) in &bundle.entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
        for &d in &a.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &a.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("tensor bundle truncated at byte {}", self.pos))
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(buf: &[u8]) -> Result<ParamBundle> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::Checkpoint("not a tensor bundle (bad magic)".into()));
    }
    let count = r.u32()?;
    let mut bundle = ParamBundle::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let shape = (0..rank)
            .map(|_| r.u64().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        bundle.push(name, Array::new(shape, data)?);
    }
    if r.pos != buf.len() {
        return Err(Error::Checkpoint("trailing bytes after tensor bundle".into()));
    }
    Ok(bundle)
}

pub fn save(bundle: &ParamBundle, path: &Path) -> Result<()> {
    std::fs::write(path, encode(bundle)).map_err(|e| Error::io(path, e))
}

pub fn load(path: &Path) -> Result<ParamBundle> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes).map_err(|e| e.context(format!("reading {}", path.display())))
}

/// Hex SHA-256 of arbitrary bytes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Content hash of a bundle's encoded form.
pub fn fingerprint(bundle: &ParamBundle) -> String {
    sha256_hex(&encode(bundle))
}
