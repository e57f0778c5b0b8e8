//! Tensor blob format.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic   8 bytes  "GFTENSOR"
//! version u32      1
//! dtype   u32      1 = f64, 2 = f32, 3 = u8, 4 = i64
//! rank    u32
//! dims    rank x u64
//! payload product(dims) elements, little-endian
//! ```

use std::io::{Read, Write};

use thiserror::Error;

pub const MAGIC: &[u8; 8] = b"GFTENSOR";
pub const BLOB_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum BlobError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported blob version {0}")]
    UnsupportedVersion(u32),
    #[error("unknown dtype code {0}")]
    UnknownDtype(u32),
    #[error("expected {expected} tensor, found {found}")]
    WrongDtype { expected: &'static str, found: &'static str },
    #[error("shape mismatch: {0}")]
    Shape(String),
}

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F64(Vec<f64>),
    F32(Vec<f32>),
    U8(Vec<u8>),
    I64(Vec<i64>),
}

impl TensorData {
    fn code(&self) -> u32 {
        match self {
            TensorData::F64(_) => 1,
            TensorData::F32(_) => 2,
            TensorData::U8(_) => 3,
            TensorData::I64(_) => 4,
        }
    }

    fn name(&self) -> &'static str {
        match self {
            TensorData::F64(_) => "f64",
            TensorData::F32(_) => "f32",
            TensorData::U8(_) => "u8",
            TensorData::I64(_) => "i64",
        }
    }

    pub fn len(&self) -> usize {
        match self {
            TensorData::F64(v) => v.len(),
            TensorData::F32(v) => v.len(),
            TensorData::U8(v) => v.len(),
            TensorData::I64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: TensorData,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: TensorData) -> Result<Self, BlobError> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(BlobError::Shape(format!(
                "dims {dims:?} hold {n} elements but payload has {}",
                data.len()
            )));
        }
        Ok(Self { dims, data })
    }

    pub fn f64(dims: Vec<usize>, v: Vec<f64>) -> Result<Self, BlobError> {
        Self::new(dims, TensorData::F64(v))
    }

    pub fn write_to<W: Write>(&self, w: &mut W) -> Result<(), BlobError> {
        w.write_all(MAGIC)?;
        w.write_all(&BLOB_VERSION.to_le_bytes())?;
        w.write_all(&self.data.code().to_le_bytes())?;
        w.write_all(&(self.dims.len() as u32).to_le_bytes())?;
        for d in &self.dims {
            w.write_all(&(*d as u64).to_le_bytes())?;
        }
        let mut buf = Vec::new();
        match &self.data {
            TensorData::F64(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
            TensorData::F32(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
            TensorData::U8(v) => buf.extend_from_slice(v),
            TensorData::I64(v) => v.iter().for_each(|x| buf.extend_from_slice(&x.to_le_bytes())),
        }
        w.write_all(&buf)?;
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to a Vec cannot fail");
        out
    }

    pub fn read_from<R: Read>(r: &mut R) -> Result<Self, BlobError> {
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(BlobError::BadMagic);
        }
        let version = read_u32(r)?;
        if version != BLOB_VERSION {
            return Err(BlobError::UnsupportedVersion(version));
        }
        let code = read_u32(r)?;
        let rank = read_u32(r)? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            dims.push(u64::from_le_bytes(b) as usize);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, d| acc.checked_mul(*d))
            .ok_or_else(|| BlobError::Shape("element count overflows".into()))?;
        let width = match code {
            1 | 4 => 8,
            2 => 4,
            3 => 1,
            c => return Err(BlobError::UnknownDtype(c)),
        };
        let mut payload = vec![0u8; n * width];
        r.read_exact(&mut payload)?;
        let data = match code {
            1 => TensorData::F64(
                payload
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            2 => TensorData::F32(
                payload
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
            3 => TensorData::U8(payload),
            _ => TensorData::I64(
                payload
                    .chunks_exact(8)
                    .map(|c| i64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            ),
        };
        Ok(Tensor { dims, data })
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self, BlobError> {
        Self::read_from(&mut bytes)
    }

    pub fn read_file(path: &std::path::Path) -> Result<Self, BlobError> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }

    pub fn as_f64(&self) -> Result<&[f64], BlobError> {
        match &self.data {
            TensorData::F64(v) => Ok(v),
            other => Err(BlobError::WrongDtype {
                expected: "f64",
                found: other.name(),
            }),
        }
    }

    pub fn as_f32(&self) -> Result<&[f32], BlobError> {
        match &self.data {
            TensorData::F32(v) => Ok(v),
            other => Err(BlobError::WrongDtype {
                expected: "f32",
                found: other.name(),
            }),
        }
    }

    pub fn as_u8(&self) -> Result<&[u8], BlobError> {
        match &self.data {
            TensorData::U8(v) => Ok(v),
            other => Err(BlobError::WrongDtype {
                expected: "u8",
                found: other.name(),
            }),
        }
    }

    pub fn expect_dims(&self, dims: &[usize]) -> Result<(), BlobError> {
        if self.dims != dims {
            return Err(BlobError::Shape(format!("expected {dims:?}, found {:?}", self.dims)));
        }
        Ok(())
    }
}

fn read_u32<R: Read>(r: &mut R) -> Result<u32, BlobError> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn header_layout() {
        let t = Tensor::f64(vec![2], vec![1.0, -2.5]).unwrap();
        let b = t.to_bytes();
        assert_eq!(&b[..8], b"GFTENSOR");
        assert_eq!(&b[8..12], &1u32.to_le_bytes());
        assert_eq!(&b[12..16], &1u32.to_le_bytes());
        assert_eq!(&b[16..20], &1u32.to_le_bytes());
        assert_eq!(&b[20..28], &2u64.to_le_bytes());
        assert_eq!(&b[28..36], &1.0f64.to_le_bytes());
        assert_eq!(b.len(), 44);
    }

    #[test]
    fn rejects_corruption() {
        let mut b = Tensor::new(vec![3], TensorData::U8(vec![1, 2, 3])).unwrap().to_bytes();
        assert!(matches!(Tensor::from_bytes(&b[..b.len() - 1]), Err(BlobError::Io(_))));
        b[0] = b'X';
        assert!(matches!(Tensor::from_bytes(&b), Err(BlobError::BadMagic)));
        assert!(Tensor::f64(vec![2, 2], vec![0.0; 3]).is_err());
    }

    proptest! {
        #[test]
        fn roundtrip_f64(v in proptest::collection::vec(any::<f64>(), 0..40)) {
            let t = Tensor::f64(vec![v.len()], v).unwrap();
            let back = Tensor::from_bytes(&t.to_bytes()).unwrap();
            prop_assert_eq!(t.to_bytes(), back.to_bytes());
        }
    }
}
