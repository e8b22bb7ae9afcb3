//! Named-array container: the on-disk format for avatars, dataset samples,
//! feature caches, checkpoints, and model assets.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"LPSA"
//! version u32 (currently 1)
//! count   u32
//! entry*  name_len u16, name utf-8,
//!         dtype u8 (0 = f64, 1 = i64, 2 = raw bytes),
//!         ndim u8, dims u64 × ndim      (bytes entries: ndim = 1, dims = [len])
//!         payload (row-major, 8 bytes per element; raw bytes verbatim)
//! ```
//!
//! Entries keep insertion order, payloads are exact bit patterns, and saves
//! go through a temp-file-then-rename so a crash never leaves a torn file.
//! The same container written twice from the same data is byte-identical.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use indexmap::IndexMap;
use ndarray::{ArrayD, IxDyn};

use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"LPSA";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub enum Entry {
    F64(ArrayD<f64>),
    I64(ArrayD<i64>),
    Bytes(Vec<u8>),
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ArrayContainer {
    entries: IndexMap<String, Entry>,
}

impl ArrayContainer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert_f64<D: ndarray::Dimension>(&mut self, name: &str, arr: ndarray::Array<f64, D>) {
        self.entries.insert(name.to_string(), Entry::F64(arr.into_dyn()));
    }

    pub fn insert_i64<D: ndarray::Dimension>(&mut self, name: &str, arr: ndarray::Array<i64, D>) {
        self.entries.insert(name.to_string(), Entry::I64(arr.into_dyn()));
    }

    pub fn insert_bytes(&mut self, name: &str, bytes: Vec<u8>) {
        self.entries.insert(name.to_string(), Entry::Bytes(bytes));
    }

    pub fn insert_str(&mut self, name: &str, s: &str) {
        self.insert_bytes(name, s.as_bytes().to_vec());
    }

    pub fn contains(&self, name: &str) -> bool {
        self.entries.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(|s| s.as_str())
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn f64_entry(&self, name: &str) -> Result<&ArrayD<f64>> {
        match self.entries.get(name) {
            Some(Entry::F64(a)) => Ok(a),
            Some(_) => Err(Error::data(format!("entry `{name}` is not f64"))),
            None => Err(Error::data(format!("missing container entry `{name}`"))),
        }
    }

    pub fn i64_entry(&self, name: &str) -> Result<&ArrayD<i64>> {
        match self.entries.get(name) {
            Some(Entry::I64(a)) => Ok(a),
            Some(_) => Err(Error::data(format!("entry `{name}` is not i64"))),
            None => Err(Error::data(format!("missing container entry `{name}`"))),
        }
    }

    pub fn bytes_entry(&self, name: &str) -> Result<&[u8]> {
        match self.entries.get(name) {
            Some(Entry::Bytes(b)) => Ok(b),
            Some(_) => Err(Error::data(format!("entry `{name}` is not bytes"))),
            None => Err(Error::data(format!("missing container entry `{name}`"))),
        }
    }

    pub fn str_entry(&self, name: &str) -> Result<&str> {
        std::str::from_utf8(self.bytes_entry(name)?)
            .map_err(|_| Error::data(format!("entry `{name}` is not utf-8")))
    }

    /// Serialize to bytes. Deterministic for identical contents.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, entry) in &self.entries {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            match entry {
                Entry::F64(a) => {
                    out.push(0u8);
                    write_dims(&mut out, a.shape());
                    for v in a.iter() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Entry::I64(a) => {
                    out.push(1u8);
                    write_dims(&mut out, a.shape());
                    for v in a.iter() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Entry::Bytes(b) => {
                    out.push(2u8);
                    write_dims(&mut out, &[b.len()]);
                    out.extend_from_slice(b);
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Cursor { buf: bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::data("bad container magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::data(format!("unsupported container version {version}")));
        }
        let count = r.u32()? as usize;
        let mut entries = IndexMap::with_capacity(count);
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::data("non-utf8 entry name"))?
                .to_string();
            let dtype = r.u8()?;
            let ndim = r.u8()? as usize;
            let mut dims = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                dims.push(r.u64()? as usize);
            }
            let n: usize = dims.iter().product();
            let entry = match dtype {
                0 => {
                    let raw = r.take(n * 8)?;
                    let data: Vec<f64> = raw
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Entry::F64(
                        ArrayD::from_shape_vec(IxDyn(&dims), data)
                            .map_err(|e| Error::data(format!("bad shape for `{name}`: {e}")))?,
                    )
                }
                1 => {
                    let raw = r.take(n * 8)?;
                    let data: Vec<i64> = raw
                        .chunks_exact(8)
                        .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                        .collect();
                    Entry::I64(
                        ArrayD::from_shape_vec(IxDyn(&dims), data)
                            .map_err(|e| Error::data(format!("bad shape for `{name}`: {e}")))?,
                    )
                }
                2 => Entry::Bytes(r.take(n)?.to_vec()),
                other => return Err(Error::data(format!("unknown dtype {other} for `{name}`"))),
            };
            entries.insert(name, entry);
        }
        Ok(Self { entries })
    }

    /// Atomic save: write a sibling temp file, then rename into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes();
        let tmp = path.with_extension("tmp-write");
        {
            let mut f = fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        fs::File::open(path)
            .map_err(|e| Error::data(format!("cannot open `{}`: {e}", path.display())))?
            .read_to_end(&mut bytes)?;
        Self::from_bytes(&bytes)
    }
}

fn write_dims(out: &mut Vec<u8>, dims: &[usize]) {
    out.push(dims.len() as u8);
    for &d in dims {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
}

struct Cursor<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::data("truncated container"));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }
    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
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
    use ndarray::{arr2, Array2};

    #[test]
    fn round_trip_is_bitwise() {
        let mut c = ArrayContainer::new();
        c.insert_f64("a", arr2(&[[1.0, 2.5e-17], [f64::MIN_POSITIVE, -0.0]]));
        c.insert_i64("b", ndarray::arr1(&[1i64, -5, i64::MAX]));
        c.insert_str("meta", "hello");
        let bytes = c.to_bytes();
        let c2 = ArrayContainer::from_bytes(&bytes).unwrap();
        assert_eq!(c, c2);
        assert_eq!(bytes, c2.to_bytes());
    }

    #[test]
    fn missing_and_mistyped_entries_error() {
        let mut c = ArrayContainer::new();
        c.insert_str("s", "x");
        assert!(c.f64_entry("nope").is_err());
        assert!(c.f64_entry("s").is_err());
        assert!(c.str_entry("s").is_ok());
    }

    #[test]
    fn save_load_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("t.lpsa");
        let mut c = ArrayContainer::new();
        let a: Array2<f64> = Array2::from_shape_fn((3, 4), |(i, j)| (i * 7 + j) as f64 * 0.1);
        c.insert_f64("arr", a);
        c.save(&p).unwrap();
        let c2 = ArrayContainer::load(&p).unwrap();
        assert_eq!(c, c2);
    }
}
