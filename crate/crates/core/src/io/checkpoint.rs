//! Binary parameter checkpoints: `"HBF1"`, format version, entry count,
//! then per entry name length, UTF-8 name, rank, dims and an `f32` payload,
//! all little-endian, closed by a CRC32 of every preceding byte.

use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"HBF1";
pub const FORMAT_VERSION: u32 = 1;

/// Serialises every tensor of `store`, sorted by name.
pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated while reading {what} at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

/// Parses a checkpoint, verifying the CRC before anything else.
pub fn decode(bytes: &[u8]) -> Result<ParamStore> {
    if bytes.len() < MAGIC.len() + 12 {
        return Err(Error::Checkpoint(format!("truncated: only {} bytes", bytes.len())));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes([tail[0], tail[1], tail[2], tail[3]]);
    let actual = crc32fast::hash(body);
    if stored != actual {
        return Err(Error::Checkpoint(format!(
            "CRC mismatch: stored {stored:#010x}, computed {actual:#010x}"
        )));
    }
    let mut r = Reader { bytes: body, pos: 0 };
    if r.take(4, "magic")? != MAGIC {
        return Err(Error::Checkpoint("bad magic, not an HBF1 checkpoint".into()));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!("unsupported format version {version}")));
    }
    let count = r.u32("entry count")?;
    let mut store = ParamStore::default();
    for _ in 0..count {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|e| Error::Checkpoint(format!("tensor name is not UTF-8: {e}")))?
            .to_string();
        let rank = r.u32("rank")? as usize;
        let dims = (0..rank)
            .map(|_| r.u32("dims").map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| Error::Checkpoint(format!("`{name}`: dims {dims:?} overflow")))?;
        let payload = r.take(n.saturating_mul(4), &name)?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| Error::Checkpoint(format!("`{name}`: {e}")))?;
        if store.get(&name).is_ok() {
            return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
        }
        store.insert(name, t);
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint(format!(
            "{} trailing bytes after the last entry",
            body.len() - r.pos
        )));
    }
    Ok(store)
}

pub fn save(store: &ParamStore, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode(store)).map_err(|e| Error::io(path, e))
}

pub fn load(path: impl AsRef<Path>) -> Result<ParamStore> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn store() -> ParamStore {
        let mut s = ParamStore::default();
        s.insert("b", Tensor::new(vec![2, 1], vec![1.5, -2.0]).unwrap());
        s.insert("a", Tensor::new(vec![1], vec![f32::MIN_POSITIVE]).unwrap());
        s
    }

    #[test]
    fn round_trip_is_bitwise() {
        let bytes = encode(&store());
        let back = decode(&bytes).unwrap();
        assert_eq!(encode(&back), bytes);
        assert_eq!(back.get("b").unwrap().data(), [1.5, -2.0]);
    }

    #[test]
    fn layout_is_little_endian_and_sorted() {
        let bytes = encode(&store());
        assert_eq!(&bytes[..4], b"HBF1");
        assert_eq!(bytes[4..8], 1u32.to_le_bytes());
        assert_eq!(bytes[8..12], 2u32.to_le_bytes());
        assert_eq!(bytes[12..16], 1u32.to_le_bytes());
        assert_eq!(bytes[16], b'a');
        assert_eq!(bytes.len(), 12 + (4 + 1 + 4 + 4 + 4) + (4 + 1 + 4 + 8 + 8) + 4);
    }

    #[test]
    fn corruption_and_truncation_are_detected() {
        let mut bytes = encode(&store());
        bytes[20] ^= 1;
        assert!(matches!(decode(&bytes), Err(Error::Checkpoint(m)) if m.contains("CRC")));
        let bytes = encode(&store());
        for cut in [0, 3, 10, bytes.len() - 1] {
            assert!(matches!(decode(&bytes[..cut]), Err(Error::Checkpoint(_))), "cut {cut}");
        }
    }
}
