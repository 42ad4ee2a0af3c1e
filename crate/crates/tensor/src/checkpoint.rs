//! `EXAT` checkpoint files.
//!
//! Layout (little-endian): magic `EXAT`, format version `u32`, then one
//! record per tensor until end of file: name length `u32`, UTF-8 name,
//! rank `u32`, `rank` dims as `u64`, `f32` payload.

use std::fs;
use std::path::Path;

use crate::array::Tensor;
use crate::error::{Result, TensorError};

pub const MAGIC: &[u8; 4] = b"EXAT";
pub const VERSION: u32 = 1;

/// Named tensors in file order.
pub type Records = Vec<(String, Tensor<f32>)>;

pub fn encode(records: &[(String, Tensor<f32>)]) -> Vec<u8> {
    let payload: usize = records.iter().map(|(n, t)| 16 + n.len() + 8 * t.rank() + 4 * t.numel()).sum();
    let mut out = Vec::with_capacity(8 + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    for (name, t) in records {
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
    out
}

pub fn decode(bytes: &[u8], origin: &str) -> Result<Records> {
    let err = |reason: &str| TensorError::Checkpoint {
        path: origin.to_string(),
        reason: reason.to_string(),
    };
    let mut cur = Cursor { bytes, pos: 0 };
    if cur.take(4).ok_or_else(|| err("truncated header"))? != MAGIC {
        return Err(err("bad magic"));
    }
    let version = cur.u32().ok_or_else(|| err("truncated header"))?;
    if version != VERSION {
        return Err(err(&format!("unsupported version {version}")));
    }
    let mut records = Vec::new();
    while cur.pos < bytes.len() {
        let len = cur.u32().ok_or_else(|| err("truncated record"))? as usize;
        let name = cur.take(len).ok_or_else(|| err("truncated name"))?;
        let name = std::str::from_utf8(name).map_err(|_| err("name is not UTF-8"))?.to_string();
        let rank = cur.u32().ok_or_else(|| err("truncated rank"))? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(cur.u64().ok_or_else(|| err("truncated dims"))? as usize);
        }
        let numel: usize = shape.iter().product();
        let raw = cur.take(4 * numel).ok_or_else(|| err("truncated payload"))?;
        let data = raw
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        records.push((name, Tensor::new(shape, data)?));
    }
    Ok(records)
}

pub fn write(path: &Path, records: &[(String, Tensor<f32>)]) -> Result<()> {
    fs::write(path, encode(records)).map_err(|source| TensorError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn read(path: &Path) -> Result<Records> {
    let bytes = fs::read(path).map_err(|source| TensorError::Io {
        path: path.display().to_string(),
        source,
    })?;
    decode(&bytes, &path.display().to_string())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Option<&'a [u8]> {
        let end = self.pos.checked_add(n)?;
        let s = self.bytes.get(self.pos..end)?;
        self.pos = end;
        Some(s)
    }

    fn u32(&mut self) -> Option<u32> {
        self.take(4).map(|b| u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn u64(&mut self) -> Option<u64> {
        self.take(8).map(|b| {
            let mut a = [0u8; 8];
            a.copy_from_slice(b);
            u64::from_le_bytes(a)
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_is_little_endian_with_u64_dims() {
        let t = Tensor::new([2usize], vec![1.0f32, -2.0]).unwrap();
        let bytes = encode(&[("w".to_string(), t)]);
        assert_eq!(&bytes[..4], b"EXAT");
        assert_eq!(&bytes[4..8], &1u32.to_le_bytes());
        assert_eq!(&bytes[8..12], &1u32.to_le_bytes());
        assert_eq!(bytes[12], b'w');
        assert_eq!(&bytes[13..17], &1u32.to_le_bytes());
        assert_eq!(&bytes[17..25], &2u64.to_le_bytes());
        assert_eq!(&bytes[25..29], &1.0f32.to_le_bytes());
        assert_eq!(bytes.len(), 33);
    }

    #[test]
    fn rejects_bad_magic_and_truncation() {
        assert!(decode(b"EXAX\x01\0\0\0", "mem").is_err());
        let t = Tensor::new([3usize], vec![1.0f32, 2.0, 3.0]).unwrap();
        let bytes = encode(&[("a".into(), t)]);
        assert!(decode(&bytes[..bytes.len() - 1], "mem").is_err());
    }

    #[test]
    fn scalar_records_round_trip() {
        let recs = vec![
            ("step".to_string(), Tensor::scalar(12.0f32)),
            ("m".to_string(), Tensor::new([2usize, 2], vec![0.5f32, 1.5, -0.0, 7.0]).unwrap()),
        ];
        let back = decode(&encode(&recs), "mem").unwrap();
        assert_eq!(back, recs);
    }
}
