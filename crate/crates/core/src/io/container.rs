//! Named tensor container.
//!
//! Layout, all integers little-endian:
//! `"QNTC"`, version `u32`, entry count `u32`, then per entry
//! `name_len u32`, UTF-8 name, dtype `u8` (0 = f32, 1 = f64), `ndim u32`,
//! `ndim` dims as `u64`, raw little-endian values.

use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Real, Tensor};

pub const MAGIC: &[u8; 4] = b"QNTC";
pub const VERSION: u32 = 1;
const MAX_NDIM: usize = 16;

#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to the requested precision.
    pub fn to<T: Real>(&self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }

    /// Wraps a tensor of either precision without converting.
    pub fn from_tensor<T: Real>(t: &Tensor<T>) -> Self {
        match T::DTYPE {
            DType::F32 => AnyTensor::F32(t.cast()),
            DType::F64 => AnyTensor::F64(t.cast()),
        }
    }

    /// Bitwise equality, so NaN payloads and signed zeros count.
    pub fn bits_eq(&self, other: &Self) -> bool {
        match (self, other) {
            (AnyTensor::F32(a), AnyTensor::F32(b)) => {
                a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            (AnyTensor::F64(a), AnyTensor::F64(b)) => {
                a.shape() == b.shape() && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            }
            _ => false,
        }
    }
}

/// Ordered list of uniquely named tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Container {
    entries: Vec<(String, AnyTensor)>,
}

impl Container {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, t: AnyTensor) -> Result<()> {
        if name.is_empty() {
            return Err(Error::contract("container entry names must be nonempty"));
        }
        if self.get(name).is_some() {
            return Err(Error::contract(format!("duplicate container entry '{name}'")));
        }
        self.entries.push((name.to_string(), t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&AnyTensor> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// Named entry converted to `T`, or a schema error naming the missing entry.
    pub fn tensor<T: Real>(&self, name: &str) -> Result<Tensor<T>> {
        self.get(name)
            .map(|t| t.to())
            .ok_or_else(|| Error::schema(name, "missing entry"))
    }

    pub fn entries(&self) -> &[(String, AnyTensor)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.entries.len() as u32).to_le_bytes());
        for (name, t) in &self.entries {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(match t.dtype() {
                DType::F32 => 0,
                DType::F64 => 1,
            });
            out.extend_from_slice(&(t.shape().len() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match t {
                AnyTensor::F32(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
                AnyTensor::F64(t) => t.data().iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes())),
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4, "magic")? != MAGIC {
            return Err(Error::schema("magic", "expected \"QNTC\""));
        }
        let version = r.u32("version")?;
        if version != VERSION {
            return Err(Error::schema("version", format!("unsupported version {version}, expected {VERSION}")));
        }
        let count = r.u32("entry_count")? as usize;
        let mut c = Container::new();
        for i in 0..count {
            let field = |f: &str| format!("entries[{i}].{f}");
            let len = r.u32(&field("name_len"))? as usize;
            let raw = r.take(len, &field("name"))?;
            let name = std::str::from_utf8(raw).map_err(|_| Error::schema(field("name"), "not valid UTF-8"))?;
            if name.is_empty() {
                return Err(Error::schema(field("name"), "empty name"));
            }
            if c.get(name).is_some() {
                return Err(Error::schema(field("name"), format!("duplicate entry '{name}'")));
            }
            let dtype = match r.take(1, &field("dtype"))?[0] {
                0 => DType::F32,
                1 => DType::F64,
                d => return Err(Error::schema(field("dtype"), format!("unknown dtype code {d}"))),
            };
            let ndim = r.u32(&field("ndim"))? as usize;
            if ndim > MAX_NDIM {
                return Err(Error::schema(field("ndim"), format!("{ndim} dimensions exceeds the limit of {MAX_NDIM}")));
            }
            let mut shape = Vec::with_capacity(ndim);
            let mut n: usize = 1;
            for k in 0..ndim {
                let d = r.u64(&format!("entries[{i}].dims[{k}]"))?;
                let d = usize::try_from(d).map_err(|_| Error::schema(field("dims"), "dimension too large"))?;
                n = n
                    .checked_mul(d)
                    .ok_or_else(|| Error::schema(field("dims"), "element count overflows"))?;
                shape.push(d);
            }
            let width = match dtype {
                DType::F32 => 4,
                DType::F64 => 8,
            };
            let nbytes = n
                .checked_mul(width)
                .ok_or_else(|| Error::schema(field("dims"), "byte count overflows"))?;
            let raw = r.take(nbytes, &field("data"))?;
            let t = match dtype {
                DType::F32 => AnyTensor::F32(Tensor::new(
                    &shape,
                    raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect(),
                )?),
                DType::F64 => AnyTensor::F64(Tensor::new(
                    &shape,
                    raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect(),
                )?),
            };
            c.entries.push((name.to_string(), t));
        }
        if r.pos != bytes.len() {
            return Err(Error::schema(
                "trailing",
                format!("{} unexpected bytes after the last entry", bytes.len() - r.pos),
            ));
        }
        Ok(c)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, field: &str) -> Result<&'a [u8]> {
        let left = self.bytes.len() - self.pos;
        if n > left {
            return Err(Error::schema(field, format!("truncated: need {n} bytes, {left} left")));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, field: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, field)?.try_into().unwrap()))
    }

    fn u64(&mut self, field: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, field)?.try_into().unwrap()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample() -> Container {
        let mut c = Container::new();
        c.insert("a", AnyTensor::F32(Tensor::from_fn(&[2, 3], |i| i as f32 - 1.5))).unwrap();
        c.insert("b.scalar", AnyTensor::F64(Tensor::scalar(f64::MIN_POSITIVE))).unwrap();
        c.insert("empty", AnyTensor::F64(Tensor::zeros(&[0, 4]))).unwrap();
        c
    }

    #[test]
    fn round_trip() {
        let c = sample();
        let bytes = c.to_bytes();
        assert_eq!(&bytes[..4], MAGIC);
        let back = Container::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        assert_eq!(back, c);
    }

    #[test]
    fn header_errors_name_fields() {
        let bytes = sample().to_bytes();
        let field = |b: &[u8]| match Container::from_bytes(b) {
            Err(Error::Schema { field, .. }) => field,
            other => panic!("expected schema error, got {other:?}"),
        };
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert_eq!(field(&bad), "magic");
        let mut bad = bytes.clone();
        bad[4] = 2;
        assert_eq!(field(&bad), "version");
        assert_eq!(field(&bytes[..10]), "entry_count");
        let mut bad = bytes.clone();
        bad.push(0);
        assert_eq!(field(&bad), "trailing");
        // dtype byte of the first entry: 12 header + 4 len + 1 name
        let mut bad = bytes.clone();
        bad[17] = 9;
        assert_eq!(field(&bad), "entries[0].dtype");
        assert_eq!(field(&bytes[..40]), "entries[0].data");
        assert_eq!(field(&bytes[..bytes.len() - 1]), "entries[2].dims[1]");
    }

    #[test]
    fn duplicate_names_rejected() {
        let mut c = sample();
        assert!(c.insert("a", AnyTensor::F32(Tensor::scalar(1.0))).is_err());
    }
}
