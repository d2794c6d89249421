//! Binary tensor checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! b"FSAC"  u32 version (= 1)  u64 tensor count
//! per tensor: u32 name length, UTF-8 name, u32 rank, rank × u64 dims,
//!             product(dims) × f64 payload
//! u32 CRC32 of every preceding byte
//! ```

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::numerics::{DenseArray, ParamStore};

pub const MAGIC: &[u8; 4] = b"FSAC";
pub const VERSION: u32 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CheckpointError {
    #[error("i/o error on {path}: {message}")]
    Io { path: String, message: String },
    #[error("not a checkpoint: bad magic")]
    Magic,
    #[error("unsupported checkpoint version {0}")]
    Version(u32),
    #[error("checksum mismatch: stored {stored:#010x}, computed {computed:#010x}")]
    Checksum { stored: u32, computed: u32 },
    #[error("truncated or malformed checkpoint: {0}")]
    Malformed(String),
}

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + store.num_scalars() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u64).to_le_bytes());
    for (name, t) in store.iter() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
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
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| CheckpointError::Malformed(format!("need {n} bytes at offset {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn decode(bytes: &[u8]) -> Result<ParamStore, CheckpointError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(CheckpointError::Magic);
    }
    if bytes.len() < 20 {
        return Err(CheckpointError::Malformed("file shorter than header".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(CheckpointError::Checksum { stored, computed });
    }
    let mut r = Reader { bytes: body, pos: 4 };
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version(version));
    }
    let count = r.u64()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| CheckpointError::Malformed("tensor name is not UTF-8".into()))?
            .to_owned();
        let rank = r.u32()? as usize;
        let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>, _>>()?;
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.ok_or_else(|| CheckpointError::Malformed(format!("tensor {name} is too large")))?;
        let raw = r.take(n.checked_mul(8).ok_or_else(|| CheckpointError::Malformed(format!("tensor {name} is too large")))?)?;
        let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        let t = DenseArray::new(shape, data).map_err(|e| CheckpointError::Malformed(format!("tensor {name}: {e}")))?;
        store.insert(name, t);
    }
    if r.pos != body.len() {
        return Err(CheckpointError::Malformed(format!("{} trailing bytes", body.len() - r.pos)));
    }
    Ok(store)
}

/// Writes through a temporary sibling and renames, so an interrupted write
/// never replaces a good checkpoint.
pub fn save(path: &Path, store: &ParamStore) -> Result<(), CheckpointError> {
    let io = |e: std::io::Error| CheckpointError::Io { path: path.display().to_string(), message: e.to_string() };
    let tmp = path.with_extension("fsac.tmp");
    fs::write(&tmp, encode(store)).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

pub fn load(path: &Path) -> Result<ParamStore, CheckpointError> {
    let bytes = fs::read(path).map_err(|e| CheckpointError::Io { path: path.display().to_string(), message: e.to_string() })?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sample_store() -> ParamStore {
        let mut s = ParamStore::new();
        s.init_normal(1, "a.w", &[3, 2], 1.0);
        s.insert("b", DenseArray::new(vec![2], vec![f64::MIN_POSITIVE, -0.0]).unwrap());
        s.insert("scalar", DenseArray::scalar(1e300));
        s
    }

    #[test]
    fn header_bytes() {
        let bytes = encode(&sample_store());
        assert_eq!(&bytes[..4], b"FSAC");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..16], &3u64.to_le_bytes());
    }

    #[test]
    fn round_trip_is_bitwise() {
        let s = sample_store();
        let bytes = encode(&s);
        let back = decode(&bytes).unwrap();
        assert_eq!(encode(&back), bytes);
        for ((n1, a), (n2, b)) in s.iter().zip(back.iter()) {
            assert_eq!(n1, n2);
            assert_eq!(a.shape(), b.shape());
            let bits = |t: &DenseArray| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn corruption_is_detected() {
        let mut bytes = encode(&sample_store());
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x10;
        assert!(matches!(decode(&bytes), Err(CheckpointError::Checksum { .. })));
        assert_eq!(decode(b"NOPE0000000000000000000"), Err(CheckpointError::Magic));
        let good = encode(&sample_store());
        assert!(decode(&good[..good.len() - 9]).is_err());
    }

    #[test]
    fn file_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.fsac");
        save(&p, &sample_store()).unwrap();
        assert_eq!(load(&p).unwrap(), sample_store());
        assert!(matches!(load(&dir.path().join("missing.fsac")), Err(CheckpointError::Io { .. })));
    }

    proptest! {
        #[test]
        fn arbitrary_values_round_trip(vals in prop::collection::vec(any::<f64>(), 1..40)) {
            let mut s = ParamStore::new();
            let n = vals.len();
            s.insert("x", DenseArray::new(vec![n], vals).unwrap());
            let bytes = encode(&s);
            prop_assert_eq!(encode(&decode(&bytes).unwrap()), bytes);
        }
    }
}
