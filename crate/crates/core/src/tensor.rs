//! Binary tensor container.
//!
//! Layout (little-endian):
//!
//! ```text
//! magic  "RTNS"      4 bytes
//! version u32        currently 1
//! ndim    u32
//! dims    ndim x u64
//! payload prod(dims) x f64, row-major
//! ```

use ndarray::{ArrayD, IxDyn};
use thiserror::Error;

pub const TENSOR_MAGIC: &[u8; 4] = b"RTNS";
pub const TENSOR_VERSION: u32 = 1;
const MAX_NDIM: u32 = 16;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum TensorError {
    #[error("unexpected end of input")]
    Truncated,
    #[error("bad magic bytes")]
    BadMagic,
    #[error("unsupported tensor version {0}")]
    UnsupportedVersion(u32),
    #[error("too many dimensions: {0}")]
    TooManyDims(u32),
    #[error("shape {shape:?} does not match {len} elements")]
    ShapeMismatch { shape: Vec<usize>, len: usize },
    #[error("{0} trailing bytes after tensor")]
    TrailingBytes(usize),
}

/// Row-major f64 tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self, TensorError> {
        match shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d)) {
            Some(n) if n == data.len() => Ok(Tensor { shape, data }),
            _ => Err(TensorError::ShapeMismatch {
                shape,
                len: data.len(),
            }),
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn from_array<D: ndarray::Dimension>(a: &ndarray::Array<f64, D>) -> Self {
        Tensor {
            shape: a.shape().to_vec(),
            data: a.iter().copied().collect(),
        }
    }

    pub fn to_array(&self) -> ArrayD<f64> {
        ArrayD::from_shape_vec(IxDyn(&self.shape), self.data.clone())
            .expect("shape validated on construction")
    }

    pub fn encoded_len(&self) -> usize {
        12 + 8 * self.shape.len() + 8 * self.data.len()
    }

    pub fn write_to(&self, out: &mut Vec<u8>) {
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.shape.len() as u32).to_le_bytes());
        for &d in &self.shape {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.encoded_len());
        self.write_to(&mut out);
        out
    }

    /// Decodes one tensor from the front of `input`, advancing it.
    pub fn read_from(input: &mut &[u8]) -> Result<Self, TensorError> {
        if take(input, 4)? != TENSOR_MAGIC {
            return Err(TensorError::BadMagic);
        }
        let version = read_u32(input)?;
        if version != TENSOR_VERSION {
            return Err(TensorError::UnsupportedVersion(version));
        }
        let ndim = read_u32(input)?;
        if ndim > MAX_NDIM {
            return Err(TensorError::TooManyDims(ndim));
        }
        let mut shape = Vec::with_capacity(ndim as usize);
        for _ in 0..ndim {
            let d = read_u64(input)?;
            shape.push(usize::try_from(d).map_err(|_| TensorError::Truncated)?);
        }
        let count = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or(TensorError::Truncated)?;
        let bytes = count.checked_mul(8).ok_or(TensorError::Truncated)?;
        let payload = take(input, bytes)?;
        let data = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        Ok(Tensor { shape, data })
    }

    /// Decodes a buffer holding exactly one tensor.
    pub fn decode(bytes: &[u8]) -> Result<Self, TensorError> {
        let mut input = bytes;
        let t = Self::read_from(&mut input)?;
        if !input.is_empty() {
            return Err(TensorError::TrailingBytes(input.len()));
        }
        Ok(t)
    }
}

pub(crate) fn take<'a>(input: &mut &'a [u8], n: usize) -> Result<&'a [u8], TensorError> {
    if input.len() < n {
        return Err(TensorError::Truncated);
    }
    let (head, tail) = input.split_at(n);
    *input = tail;
    Ok(head)
}

pub(crate) fn read_u32(input: &mut &[u8]) -> Result<u32, TensorError> {
    Ok(u32::from_le_bytes(take(input, 4)?.try_into().expect("4 bytes")))
}

fn read_u64(input: &mut &[u8]) -> Result<u64, TensorError> {
    Ok(u64::from_le_bytes(take(input, 8)?.try_into().expect("8 bytes")))
}
