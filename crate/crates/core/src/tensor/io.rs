//! `OSTN` tensor files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset  size       field
//! 0       4          magic "OSTN"
//! 4       1          version = 1
//! 5       1          dtype (0 = f32, 1 = f64)
//! 6       1          ndim (1..=4)
//! 7       1          reserved = 0
//! 8       4 * ndim   extents, u32
//! ...     len * size data, row-major
//! ```

use super::{shape_str, Scalar, Tensor};
use crate::error::{Error, Result};

pub const MAGIC: &[u8; 4] = b"OSTN";
pub const VERSION: u8 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DType {
    F32 = 0,
    F64 = 1,
}

impl DType {
    pub fn from_code(code: u8) -> Result<Self> {
        match code {
            0 => Ok(DType::F32),
            1 => Ok(DType::F64),
            other => Err(Error::format(format!("unknown dtype code {}", other))),
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F32 => 4,
            DType::F64 => 8,
        }
    }
}

/// A tensor read from disk in whichever precision it was stored.
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

    /// Converts to the requested precision.
    pub fn into_scalar<T: Scalar>(self) -> Tensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

/// Writes a tensor file.
pub fn save_tensor<T: Scalar>(path: impl AsRef<std::path::Path>, t: &Tensor<T>) -> Result<()> {
    std::fs::write(path, write_tensor(t))?;
    Ok(())
}

/// Reads a tensor file of either precision, converting to `T`.
pub fn load_tensor<T: Scalar>(path: impl AsRef<std::path::Path>) -> Result<Tensor<T>> {
    Ok(read_tensor_any(&std::fs::read(path)?)?.into_scalar())
}

pub fn write_tensor<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::with_capacity(8 + 4 * t.ndim() + t.len() * T::BYTES);
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(T::DTYPE as u8);
    out.push(t.ndim() as u8);
    out.push(0);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for &v in t.data() {
        v.write_le(&mut out);
    }
    out
}

struct Header {
    dtype: DType,
    shape: Vec<usize>,
    data_offset: usize,
}

fn read_header(bytes: &[u8]) -> Result<Header> {
    if bytes.len() < 8 {
        return Err(Error::format("tensor file shorter than its header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(Error::format(format!("bad tensor magic {:?}", &bytes[0..4])));
    }
    if bytes[4] != VERSION {
        return Err(Error::format(format!("unsupported tensor version {}", bytes[4])));
    }
    let dtype = DType::from_code(bytes[5])?;
    let ndim = bytes[6] as usize;
    if !(1..=4).contains(&ndim) {
        return Err(Error::format(format!("invalid ndim {}", ndim)));
    }
    if bytes[7] != 0 {
        return Err(Error::format("reserved header byte must be zero"));
    }
    let data_offset = 8 + 4 * ndim;
    if bytes.len() < data_offset {
        return Err(Error::format("truncated tensor extents"));
    }
    let shape: Vec<usize> = (0..ndim)
        .map(|i| {
            let o = 8 + 4 * i;
            u32::from_le_bytes([bytes[o], bytes[o + 1], bytes[o + 2], bytes[o + 3]]) as usize
        })
        .collect();
    let len: usize = shape.iter().product();
    let expected = data_offset + len * dtype.size();
    if bytes.len() != expected {
        return Err(Error::format(format!(
            "tensor {} needs {} bytes, file has {}",
            shape_str(&shape),
            expected,
            bytes.len()
        )));
    }
    Ok(Header {
        dtype,
        shape,
        data_offset,
    })
}

fn decode<T: Scalar>(bytes: &[u8], h: &Header) -> Result<Tensor<T>> {
    let data = bytes[h.data_offset..]
        .chunks_exact(T::BYTES)
        .map(T::read_le)
        .collect();
    Tensor::from_vec(&h.shape, data)
}

/// Reads a tensor that must be stored in precision `T`.
pub fn read_tensor<T: Scalar>(bytes: &[u8]) -> Result<Tensor<T>> {
    let h = read_header(bytes)?;
    if h.dtype != T::DTYPE {
        return Err(Error::format(format!(
            "stored dtype {:?} does not match requested {:?}",
            h.dtype,
            T::DTYPE
        )));
    }
    decode(bytes, &h)
}

pub fn read_tensor_any(bytes: &[u8]) -> Result<AnyTensor> {
    let h = read_header(bytes)?;
    match h.dtype {
        DType::F32 => Ok(AnyTensor::F32(decode(bytes, &h)?)),
        DType::F64 => Ok(AnyTensor::F64(decode(bytes, &h)?)),
    }
}
