//! Flat binary container: parameter paths mapped to shaped little-endian
//! `f64` payloads, preceded by a version and a free-form UTF-8 header.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! b"SGCK" | version: u32 | header_len: u64 | header bytes
//! count: u32
//! count × { name_len: u32 | name | ndim: u32 | dims: u64 × ndim | values: f64 × numel }
//! ```

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"SGCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub header: String,
    pub entries: Vec<(String, Tensor)>,
}

impl Checkpoint {
    pub fn new(header: String, entries: Vec<(String, Tensor)>) -> Self {
        Checkpoint { version: VERSION, header, entries }
    }

    pub fn from_store(header: String, store: &ParamStore) -> Self {
        let entries = store.iter().map(|(_, n, t)| (n.to_string(), t.clone())).collect();
        Checkpoint::new(header, entries)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.serialized_len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&self.version.to_le_bytes());
        out.extend_from_slice(&(self.header.len() as u64).to_le_bytes());
        out.extend_from_slice(self.header.as_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    /// Exact length of [`Checkpoint::to_bytes`] without materializing it.
    pub fn serialized_len(&self) -> usize {
        let body: usize = self
            .entries
            .iter()
            .map(|(n, t)| 4 + n.len() + 4 + 8 * t.shape().len() + 8 * t.numel())
            .sum();
        4 + 4 + 8 + self.header.len() + 4 + body
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::Format("bad checkpoint magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format(format!("unsupported checkpoint version {version}")));
        }
        let header_len = r.u64()? as usize;
        let header = String::from_utf8(r.take(header_len)?.to_vec())
            .map_err(|_| Error::Format("header is not UTF-8".into()))?;
        let count = r.u32()? as usize;
        let mut entries = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Format("parameter path is not UTF-8".into()))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel.checked_mul(8).ok_or_else(|| Error::Format("size overflow".into()))?)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect();
            entries.push((name, Tensor::new(shape, data)?));
        }
        if r.pos != bytes.len() {
            return Err(Error::Format("trailing bytes after last entry".into()));
        }
        Ok(Checkpoint { version, header, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::Format("unexpected end of checkpoint".into()))?;
        let s = &self.bytes[self.pos..end];
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

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn rejects_truncated_and_foreign_bytes() {
        let ck = Checkpoint::new("{}".into(), vec![("w".into(), Tensor::ones(&[2, 2]))]);
        let bytes = ck.to_bytes();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        assert!(Checkpoint::from_bytes(b"NOPE").is_err());
        assert_eq!(bytes.len(), ck.serialized_len());
    }

    proptest! {
        #[test]
        fn round_trip_is_lossless(
            vals in proptest::collection::vec(-1e6f64..1e6, 1..40),
            header in "[ -~]{0,30}",
        ) {
            let n = vals.len();
            let ck = Checkpoint::new(header, vec![
                ("a.b".into(), Tensor::new(vec![n], vals.clone()).unwrap()),
                ("c".into(), Tensor::new(vec![1, n], vals).unwrap()),
            ]);
            let bytes = ck.to_bytes();
            prop_assert_eq!(bytes.len(), ck.serialized_len());
            let back = Checkpoint::from_bytes(&bytes).unwrap();
            prop_assert!(back.entries.iter().zip(&ck.entries).all(|(a, b)| a.0 == b.0 && a.1.bit_eq(&b.1)));
            prop_assert_eq!(back.header, ck.header);
        }
    }
}
