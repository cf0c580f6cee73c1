//! Flat binary container for named parameter arrays.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "CACC"            4 bytes magic
//! version           u32 (currently 1)
//! count             u32 number of arrays
//! repeated count times:
//!   name_len        u32
//!   name            name_len bytes of UTF-8
//!   rank            u32
//!   dims            rank × u64
//!   data            product(dims) × f32
//! ```

use std::path::Path;

use super::{ParamStore, Real, Tensor};
use crate::{Error, Result};

pub const MAGIC: &[u8; 4] = b"CACC";
pub const VERSION: u32 = 1;

pub fn encode<T: Real>(arrays: &[(&str, &Tensor<T>)]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for (name, t) in arrays {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| malformed("truncated"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

fn malformed(detail: impl Into<String>) -> Error {
    Error::Malformed {
        what: "checkpoint".into(),
        detail: detail.into(),
    }
}

pub fn decode<T: Real>(bytes: &[u8]) -> Result<Vec<(String, Tensor<T>)>> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(malformed("bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(malformed(format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut arrays = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| malformed("array name is not UTF-8"))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank.min(16));
        for _ in 0..rank {
            shape.push(usize::try_from(r.u64()?).map_err(|_| malformed("dimension overflow"))?);
        }
        let n = shape
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .ok_or_else(|| malformed("dimension overflow"))?;
        let raw = r.take(n.checked_mul(4).ok_or_else(|| malformed("dimension overflow"))?)?;
        let data = raw
            .chunks_exact(4)
            .map(|c| T::of(f32::from_le_bytes(c.try_into().unwrap()) as f64))
            .collect();
        arrays.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(malformed("trailing bytes"));
    }
    Ok(arrays)
}

pub fn save<T: Real>(store: &ParamStore<T>, path: &Path) -> Result<()> {
    let arrays: Vec<_> = store.iter().collect();
    crate::io::write_atomic(path, &encode(&arrays))
}

pub fn load_arrays<T: Real>(path: &Path) -> Result<Vec<(String, Tensor<T>)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn header_layout() {
        let t = Tensor::new(vec![2], vec![1.0f32, -2.5]).unwrap();
        let bytes = encode(&[("w", &t)]);
        assert_eq!(&bytes[..4], b"CACC");
        assert_eq!(u32::from_le_bytes(bytes[4..8].try_into().unwrap()), 1);
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 1);
        assert_eq!(bytes.len(), 12 + 4 + 1 + 4 + 8 + 8);
        assert_eq!(&bytes[bytes.len() - 4..], &(-2.5f32).to_le_bytes());
    }

    #[test]
    fn round_trip_and_corruption() {
        let a = Tensor::from_fn(vec![2, 3, 1], |i| i as f32 * 0.5);
        let b = Tensor::new(vec![0], vec![]).unwrap();
        let bytes = encode(&[("conv.weight", &a), ("empty", &b)]);
        let back: Vec<(String, Tensor<f32>)> = decode(&bytes).unwrap();
        assert_eq!(back, vec![("conv.weight".to_string(), a), ("empty".to_string(), b)]);
        assert!(decode::<f32>(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(decode::<f32>(&bad).is_err());
    }
}
