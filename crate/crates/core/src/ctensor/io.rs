//! `CDS1` tensor container.
//!
//! Layout: the magic bytes `CDS1`, a little-endian `u32` byte length, a JSON
//! descriptor `{"shape": [...], "precision": "fp32"|"fp64", "layout": "planar"}`,
//! then the raw little-endian real plane followed by the imaginary plane.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use super::{ComplexTensor, Precision, Real};
use crate::{CdsError, Result};

pub const MAGIC: &[u8; 4] = b"CDS1";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorDescriptor {
    pub shape: Vec<usize>,
    pub precision: Precision,
    pub layout: String,
}

/// A decoded tensor of either precision.
#[derive(Debug, Clone, PartialEq)]
pub enum AnyTensor {
    F32(ComplexTensor<f32>),
    F64(ComplexTensor<f64>),
}

impl AnyTensor {
    pub fn from_tensor<T: Real>(t: ComplexTensor<T>) -> Self {
        match T::PRECISION {
            Precision::Fp32 => AnyTensor::F32(t.cast()),
            Precision::Fp64 => AnyTensor::F64(t.cast()),
        }
    }

    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    /// Converts to `T`, rounding if the stored precision differs.
    pub fn into_precision<T: Real>(self) -> ComplexTensor<T> {
        match self {
            AnyTensor::F32(t) => t.cast(),
            AnyTensor::F64(t) => t.cast(),
        }
    }
}

pub fn encode_tensor<T: Real>(t: &ComplexTensor<T>) -> Result<Vec<u8>> {
    let desc = TensorDescriptor { shape: t.shape().to_vec(), precision: T::PRECISION, layout: "planar".into() };
    let json = serde_json::to_vec(&desc)?;
    let mut out = Vec::with_capacity(8 + json.len() + 2 * t.len() * T::PRECISION.byte_width());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for &v in t.re() {
        v.write_le(&mut out);
    }
    for &v in t.im() {
        v.write_le(&mut out);
    }
    Ok(out)
}

fn read_planes<T: Real>(shape: &[usize], body: &[u8]) -> Result<ComplexTensor<T>> {
    let n: usize = shape.iter().product();
    let width = T::PRECISION.byte_width();
    if body.len() != 2 * n * width {
        return Err(CdsError::Format(format!(
            "expected {} payload bytes for shape {shape:?}, found {}",
            2 * n * width,
            body.len()
        )));
    }
    let plane = |k: usize| -> Vec<T> {
        body[k * n * width..(k + 1) * n * width].chunks_exact(width).map(T::read_le).collect()
    };
    ComplexTensor::from_planes(shape, plane(0), plane(1))
}

/// Decodes one tensor occupying all of `bytes`.
pub fn decode_tensor(bytes: &[u8]) -> Result<AnyTensor> {
    if bytes.len() < 8 || &bytes[..4] != MAGIC {
        return Err(CdsError::Format("missing CDS1 header".into()));
    }
    let len = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes")) as usize;
    let json = bytes
        .get(8..8 + len)
        .ok_or_else(|| CdsError::Format("truncated tensor descriptor".into()))?;
    let desc: TensorDescriptor = serde_json::from_slice(json)?;
    if desc.layout != "planar" {
        return Err(CdsError::Format(format!("unsupported layout '{}'", desc.layout)));
    }
    let body = &bytes[8 + len..];
    Ok(match desc.precision {
        Precision::Fp32 => AnyTensor::F32(read_planes(&desc.shape, body)?),
        Precision::Fp64 => AnyTensor::F64(read_planes(&desc.shape, body)?),
    })
}

pub fn write_tensor<T: Real, W: Write>(t: &ComplexTensor<T>, mut w: W) -> Result<()> {
    w.write_all(&encode_tensor(t)?)?;
    Ok(())
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<AnyTensor> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode_tensor(&bytes)
}
