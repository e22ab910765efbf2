//! Binary parameter files.
//!
//! Layout: `PSEG1`, then per parameter a u64 name length, the UTF-8 name, a
//! u64 rank, u64 extents and the f64 payload (all little-endian), and finally
//! the FNV-1a hash of every preceding byte.

use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};
use crate::util::fnv1a;

pub const MAGIC: &[u8; 5] = b"PSEG1";

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = MAGIC.to_vec();
    for (name, t) in store.iter() {
        out.extend((name.len() as u64).to_le_bytes());
        out.extend(name.as_bytes());
        out.extend((t.shape().len() as u64).to_le_bytes());
        for &e in t.shape() {
            out.extend((e as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend(v.to_le_bytes());
        }
    }
    let h = fnv1a(&out);
    out.extend(h.to_le_bytes());
    out
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Length {
                path: self.path.to_path_buf(),
                expected: self.pos + n,
                found: self.bytes.len(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn count(&mut self, what: &str) -> Result<usize> {
        let v = self.u64()?;
        let left = (self.bytes.len() - self.pos) as u64;
        if v > left.max(64) {
            return Err(Error::parse(self.path, format!("implausible {what} {v} at byte {}", self.pos - 8)));
        }
        Ok(v as usize)
    }
}

/// Decodes every `(name, tensor)` pair after verifying the checksum.
pub fn decode(path: &Path, bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    if bytes.len() < MAGIC.len() + 8 {
        return Err(Error::Length {
            path: path.to_path_buf(),
            expected: MAGIC.len() + 8,
            found: bytes.len(),
        });
    }
    if &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::parse(path, "not a checkpoint (bad magic)"));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let computed = fnv1a(body);
    if stored != computed {
        return Err(Error::Checksum {
            path: path.to_path_buf(),
            stored,
            computed,
        });
    }
    let mut r = Reader {
        path,
        bytes: body,
        pos: MAGIC.len(),
    };
    let mut out = Vec::new();
    while r.pos < body.len() {
        let len = r.count("name length")?;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| Error::parse(path, "parameter name is not UTF-8"))?
            .to_string();
        let rank = r.count("rank")?;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.count("extent")?);
        }
        let n: usize = shape.iter().product();
        let data = r
            .take(n.checked_mul(8).ok_or_else(|| Error::parse(path, "tensor too large"))?)?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        out.push((name, Tensor::new(&shape, data)?));
    }
    Ok(out)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<()> {
    std::fs::write(path, encode(store)).map_err(|e| Error::io(path, e))
}

/// Loads values into `expected`, which fixes the parameter inventory:
/// unknown, missing or reshaped entries are errors.
pub fn load_into(expected: &mut ParamStore, path: &Path) -> Result<()> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let entries = decode(path, &bytes)?;
    let mut seen = std::collections::HashSet::new();
    for (name, t) in entries {
        let dst = expected
            .get_mut(&name)
            .ok_or_else(|| Error::parse(path, format!("unexpected parameter `{name}`")))?;
        if dst.shape() != t.shape() {
            return Err(Error::parse(
                path,
                format!("`{name}` has shape {:?}, expected {:?}", t.shape(), dst.shape()),
            ));
        }
        if !seen.insert(name.clone()) {
            return Err(Error::parse(path, format!("duplicate parameter `{name}`")));
        }
        dst.data_mut().copy_from_slice(t.data());
    }
    if let Some(missing) = expected.names().find(|n| !seen.contains(*n)) {
        return Err(Error::parse(path, format!("missing parameter `{missing}`")));
    }
    Ok(())
}
