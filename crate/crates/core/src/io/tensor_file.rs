//! Single-tensor container.
//!
//! | offset      | size        | content                                 |
//! |-------------|-------------|-----------------------------------------|
//! | 0           | 4           | magic `DCT1`                            |
//! | 4           | 1           | dtype code: 1 = f32, 2 = f64            |
//! | 5           | 1           | ndim                                    |
//! | 6           | 8 * ndim    | extents, little-endian u64              |
//! | 6 + 8*ndim  | numel * 4/8 | row-major payload, little-endian        |
//!
//! A zero-dimensional tensor stores exactly one value.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

pub const MAGIC: &[u8; 4] = b"DCT1";

fn dtype_code(d: DType) -> u8 {
    match d {
        DType::F32 => 1,
        DType::F64 => 2,
    }
}

pub(crate) fn format_err(offset: usize, reason: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        reason: reason.into(),
    }
}

pub fn encode_tensor(t: &Tensor) -> Vec<u8> {
    let size = match t.dtype() {
        DType::F32 => 4,
        DType::F64 => 8,
    };
    let mut out = Vec::with_capacity(6 + 8 * t.ndim() + size * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(dtype_code(t.dtype()));
    out.push(u8::try_from(t.ndim()).expect("at most 255 dimensions"));
    for &s in t.shape() {
        out.extend_from_slice(&(s as u64).to_le_bytes());
    }
    match t.dtype() {
        DType::F32 => t
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => t.data().iter().for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

/// Decodes one tensor from the front of `bytes`. Returns the tensor and the
/// number of bytes consumed. Error offsets are reported relative to `base`.
pub fn decode_tensor(bytes: &[u8], base: usize) -> Result<(Tensor, usize)> {
    let need = |end: usize, what: &str| -> Result<()> {
        if bytes.len() < end {
            Err(format_err(
                base + bytes.len(),
                format!("truncated {what}: need {} more bytes", end - bytes.len()),
            ))
        } else {
            Ok(())
        }
    };
    need(6, "header")?;
    if &bytes[..4] != MAGIC {
        return Err(format_err(base, format!("bad magic {:?}", &bytes[..4])));
    }
    let dtype = match bytes[4] {
        1 => DType::F32,
        2 => DType::F64,
        c => return Err(format_err(base + 4, format!("unknown dtype code {c}"))),
    };
    let ndim = bytes[5] as usize;
    need(6 + 8 * ndim, "shape")?;
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let at = 6 + 8 * i;
        let v = u64::from_le_bytes(bytes[at..at + 8].try_into().unwrap());
        if v == 0 || v > u32::MAX as u64 {
            return Err(format_err(base + at, format!("invalid extent {v}")));
        }
        shape.push(v as usize);
    }
    let numel = shape
        .iter()
        .try_fold(1usize, |acc, &s| acc.checked_mul(s))
        .ok_or_else(|| format_err(base + 6, "shape overflows"))?;
    let size = if dtype == DType::F32 { 4 } else { 8 };
    let start = 6 + 8 * ndim;
    let end = numel
        .checked_mul(size)
        .and_then(|n| n.checked_add(start))
        .ok_or_else(|| format_err(base + 6, "payload size overflows"))?;
    need(end, "payload")?;
    let payload = &bytes[start..end];
    let data: Vec<f64> = match dtype {
        DType::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect(),
        DType::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect(),
    };
    let t = Tensor::new(&shape, data)
        .map_err(|e| format_err(base, e.to_string()))?
        .with_dtype(dtype);
    Ok((t, end))
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    fs::write(path, encode_tensor(t))?;
    Ok(())
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let (t, used) = decode_tensor(&bytes, 0)?;
    if used != bytes.len() {
        return Err(format_err(used, format!("{} trailing bytes", bytes.len() - used)));
    }
    Ok(t)
}

/// Loads and insists on a particular storage dtype.
pub fn load_tensor_as(path: impl AsRef<Path>, dtype: DType) -> Result<Tensor> {
    let t = load_tensor(path)?;
    if t.dtype() != dtype {
        return Err(format_err(4, format!("expected {dtype:?}, file holds {:?}", t.dtype())));
    }
    Ok(t)
}
