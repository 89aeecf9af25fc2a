//! Parameter checkpoints.
//!
//! Layout: magic `CPMN`, `u16` format version, then tensor records until end
//! of file. Each record is a `u32` name length, the UTF-8 name, a `u32` rank,
//! `rank` dims as `u32`, and the values as little-endian `f64`. All integers
//! are little-endian.

use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::error::{ensure, Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CPMN";
pub const CHECKPOINT_VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

impl NamedTensor {
    pub fn new(name: impl Into<String>, dims: Vec<usize>, values: Vec<f64>) -> Self {
        debug_assert_eq!(dims.iter().product::<usize>(), values.len());
        Self {
            name: name.into(),
            dims,
            values,
        }
    }

    pub fn scalar(name: impl Into<String>, value: f64) -> Self {
        Self::new(name, vec![1], vec![value])
    }
}

/// Tensors keyed by name, in file order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TensorStore {
    order: Vec<String>,
    tensors: BTreeMap<String, NamedTensor>,
}

impl TensorStore {
    pub fn new(tensors: Vec<NamedTensor>) -> Result<Self> {
        let mut store = Self::default();
        for t in tensors {
            store.insert(t)?;
        }
        Ok(store)
    }

    pub fn insert(&mut self, tensor: NamedTensor) -> Result<()> {
        ensure!(
            !self.tensors.contains_key(&tensor.name),
            Format,
            "duplicate tensor name {}",
            tensor.name
        );
        self.order.push(tensor.name.clone());
        self.tensors.insert(tensor.name.clone(), tensor);
        Ok(())
    }

    pub fn extend(&mut self, tensors: Vec<NamedTensor>) -> Result<()> {
        tensors.into_iter().try_for_each(|t| self.insert(t))
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    /// Look up a tensor and check its shape.
    pub fn expect(&self, name: &str, dims: &[usize]) -> Result<&NamedTensor> {
        let t = self
            .get(name)
            .ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name}")))?;
        ensure!(
            t.dims == dims,
            Shape,
            "tensor {name} has dims {:?}, expected {dims:?}",
            t.dims
        );
        Ok(t)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.order.iter().map(String::as_str)
    }

    pub fn iter(&self) -> impl Iterator<Item = &NamedTensor> {
        self.order.iter().map(|n| &self.tensors[n])
    }

    pub fn len(&self) -> usize {
        self.order.len()
    }

    pub fn is_empty(&self) -> bool {
        self.order.is_empty()
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for t in self.iter() {
            let name = t.name.as_bytes();
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&(t.dims.len() as u32).to_le_bytes())?;
            for &d in &t.dims {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            for v in &t.values {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        self.write_to(&mut buf).expect("writing to a Vec cannot fail");
        buf
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cur = Cursor { bytes, pos: 0 };
        ensure!(cur.take(4)? == CHECKPOINT_MAGIC, Format, "bad checkpoint magic");
        let version = cur.u16()?;
        ensure!(version == CHECKPOINT_VERSION, Format, "unsupported checkpoint version {version}");
        let mut store = Self::default();
        while cur.pos < bytes.len() {
            let name_len = cur.u32()? as usize;
            let name = std::str::from_utf8(cur.take(name_len)?)
                .map_err(|_| Error::Corrupt("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = cur.u32()? as usize;
            let dims = (0..rank).map(|_| cur.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let count: usize = dims.iter().product();
            let raw = cur.take(count.checked_mul(8).ok_or_else(|| Error::Corrupt("tensor too large".into()))?)?;
            let values = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            store.insert(NamedTensor { name, dims, values })?;
        }
        Ok(store)
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}

pub(crate) struct Cursor<'a> {
    pub bytes: &'a [u8],
    pub pos: usize,
}

impl<'a> Cursor<'a> {
    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Corrupt(format!("truncated: needed {n} bytes at offset {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> TensorStore {
        TensorStore::new(vec![
            NamedTensor::new("rgb.stageA.conv1.weight", vec![2, 1, 3], vec![0.5, -1.0, 2.0, 1e-300, f64::MAX, -0.0]),
            NamedTensor::scalar("epoch", 3.0),
        ])
        .unwrap()
    }

    #[test]
    fn header_layout() {
        let bytes = sample().to_bytes();
        assert_eq!(&bytes[..4], b"CPMN");
        assert_eq!(u16::from_le_bytes([bytes[4], bytes[5]]), 1);
        let name_len = u32::from_le_bytes(bytes[6..10].try_into().unwrap()) as usize;
        assert_eq!(&bytes[10..10 + name_len], b"rgb.stageA.conv1.weight");
    }

    #[test]
    fn roundtrip_is_bit_exact() {
        let store = sample();
        let back = TensorStore::from_bytes(&store.to_bytes()).unwrap();
        assert_eq!(back.names().collect::<Vec<_>>(), store.names().collect::<Vec<_>>());
        for (a, b) in store.iter().zip(back.iter()) {
            assert_eq!(a.dims, b.dims);
            let bits = |t: &NamedTensor| t.values.iter().map(|v| v.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(a), bits(b));
        }
    }

    #[test]
    fn corrupt_inputs() {
        let bytes = sample().to_bytes();
        assert!(matches!(TensorStore::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Corrupt(_))));
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(TensorStore::from_bytes(&bad), Err(Error::Format(_))));
        let mut bad = bytes;
        bad[4] = 9;
        assert!(matches!(TensorStore::from_bytes(&bad), Err(Error::Format(_))));
    }

    #[test]
    fn expect_checks_dims() {
        let store = sample();
        assert!(store.expect("epoch", &[1]).is_ok());
        assert!(matches!(store.expect("epoch", &[2]), Err(Error::Shape(_))));
        assert!(matches!(store.expect("nope", &[1]), Err(Error::Format(_))));
    }
}
