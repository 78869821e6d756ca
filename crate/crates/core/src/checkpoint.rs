//! Binary parameter snapshots.
//!
//! Layout (all integers little-endian): magic `NWLCKPT\0`, `u32` version,
//! `u32` entry count, then per entry `u32` name length, UTF-8 name,
//! `u32` rows, `u32` cols and `rows * cols` `f64` values in row-major order.

use std::fs;
use std::path::Path;

use thiserror::Error;

use crate::autodiff::{Mat, ParamStore};

pub const MAGIC: &[u8; 8] = b"NWLCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: not a checkpoint (bad magic)")]
    Magic { path: String },
    #[error("{path}: unsupported checkpoint version {version}")]
    Version { path: String, version: u32 },
    #[error("{path}: truncated at byte {offset}")]
    Truncated { path: String, offset: usize },
    #[error("{path}: entry name is not UTF-8")]
    Name { path: String },
    #[error("checkpoint does not match the model: {0}")]
    Mismatch(String),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub value: Mat,
}

pub fn encode(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for e in store.entries() {
        out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
        out.extend_from_slice(e.name.as_bytes());
        let (r, c) = e.value.dim();
        out.extend_from_slice(&(r as u32).to_le_bytes());
        out.extend_from_slice(&(c as u32).to_le_bytes());
        for v in e.value.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a str,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(CheckpointError::Truncated {
                path: self.path.into(),
                offset: self.pos,
            });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

pub fn decode(bytes: &[u8], path: &str) -> Result<Vec<Entry>, CheckpointError> {
    let mut r = Reader { bytes, pos: 0, path };
    if r.take(8).ok() != Some(MAGIC.as_slice()) {
        return Err(CheckpointError::Magic { path: path.into() });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(CheckpointError::Version {
            path: path.into(),
            version,
        });
    }
    let count = r.u32()?;
    let mut entries = Vec::new();
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|_| CheckpointError::Name { path: path.into() })?
            .to_string();
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let raw = r.take(rows.saturating_mul(cols).saturating_mul(8))?;
        let values: Vec<f64> = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        let value = Mat::from_shape_vec((rows, cols), values).expect("length checked");
        entries.push(Entry { name, value });
    }
    Ok(entries)
}

pub fn save(store: &ParamStore, path: &Path) -> Result<(), CheckpointError> {
    fs::write(path, encode(store)).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn load(path: &Path) -> Result<Vec<Entry>, CheckpointError> {
    let p = path.display().to_string();
    let bytes = fs::read(path).map_err(|source| CheckpointError::Io { path: p.clone(), source })?;
    decode(&bytes, &p)
}

/// Overwrite every entry of `store` with the checkpoint value of the same
/// name. Missing names and shape mismatches are errors.
pub fn restore(store: &mut ParamStore, entries: &[Entry]) -> Result<(), CheckpointError> {
    for e in store.entries() {
        match entries.iter().find(|c| c.name == e.name) {
            Some(c) if c.value.dim() == e.value.dim() => {}
            Some(c) => {
                return Err(CheckpointError::Mismatch(format!(
                    "`{}` is {:?} in the checkpoint, {:?} in the model",
                    e.name,
                    c.value.dim(),
                    e.value.dim()
                )))
            }
            None => return Err(CheckpointError::Mismatch(format!("`{}` missing from the checkpoint", e.name))),
        }
    }
    for c in entries {
        if let Some(id) = store.id(&c.name) {
            store.value_mut(id).assign(&c.value);
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn store() -> ParamStore {
        let mut s = ParamStore::new();
        let g = s.group("g");
        s.insert("a.w", array![[1.0, -2.5], [3.25, f64::MIN_POSITIVE]], g);
        s.insert("a.b", array![[0.1, 0.2, 0.3]], g);
        s
    }

    #[test]
    fn round_trip_is_bit_exact() {
        let s = store();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.nwl");
        save(&s, &path).unwrap();
        let entries = load(&path).unwrap();
        let mut t = store();
        let id = t.id("a.b").unwrap();
        t.value_mut(id).fill(0.0);
        restore(&mut t, &entries).unwrap();
        for (a, b) in s.entries().iter().zip(t.entries()) {
            assert_eq!(a.name, b.name);
            let bits = |m: &Mat| m.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.value), bits(&b.value));
        }
    }

    #[test]
    fn header_is_checked() {
        let mut bytes = encode(&store());
        assert!(matches!(decode(&bytes[..20], "x"), Err(CheckpointError::Truncated { .. })));
        bytes[8] = 9;
        assert!(matches!(decode(&bytes, "x"), Err(CheckpointError::Version { version: 9, .. })));
        bytes[0] = b'X';
        assert!(matches!(decode(&bytes, "x"), Err(CheckpointError::Magic { .. })));
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let entries = decode(&encode(&store()), "x").unwrap();
        let mut other = ParamStore::new();
        let g = other.group("g");
        other.insert("a.w", array![[1.0]], g);
        assert!(matches!(restore(&mut other, &entries), Err(CheckpointError::Mismatch(_))));
    }
}
