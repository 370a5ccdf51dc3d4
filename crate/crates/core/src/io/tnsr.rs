//! TNSR fixture format.
//!
//! Little-endian layout: magic `TNSR`, `u8` version (1), `u8` dtype code
//! (0 = float32, 1 = float64), `u8` ndim, `u8` reserved (0), `ndim × u64`
//! extents, then the row-major payload. Nothing follows the payload.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::{DType, Tensor};

pub const MAGIC: &[u8; 4] = b"TNSR";
pub const VERSION: u8 = 1;
const HEADER_LEN: usize = 8;

pub fn encode(t: &Tensor) -> Vec<u8> {
    let dtype = t.dtype();
    let mut out = Vec::with_capacity(HEADER_LEN + 8 * t.ndim() + dtype.size_of() * t.numel());
    out.extend_from_slice(MAGIC);
    out.push(VERSION);
    out.push(dtype.code());
    out.push(t.ndim() as u8);
    out.push(0);
    for &d in t.dims() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    match dtype {
        DType::F32 => t
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&(v as f32).to_le_bytes())),
        DType::F64 => t
            .data()
            .iter()
            .for_each(|&v| out.extend_from_slice(&v.to_le_bytes())),
    }
    out
}

fn fail(offset: usize, msg: impl Into<String>) -> Error {
    Error::Format {
        offset: offset as u64,
        msg: msg.into(),
    }
}

pub fn decode(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < HEADER_LEN {
        return Err(fail(bytes.len(), format!("truncated header ({} bytes)", bytes.len())));
    }
    if &bytes[..4] != MAGIC {
        return Err(fail(0, "bad magic, expected \"TNSR\""));
    }
    if bytes[4] != VERSION {
        return Err(fail(4, format!("unsupported version {}", bytes[4])));
    }
    let dtype = DType::from_code(bytes[5]).ok_or_else(|| fail(5, format!("unknown dtype code {}", bytes[5])))?;
    let ndim = bytes[6] as usize;
    if ndim == 0 {
        return Err(fail(6, "ndim must be positive"));
    }
    if bytes[7] != 0 {
        return Err(fail(7, format!("reserved byte is {}, expected 0", bytes[7])));
    }
    let mut dims = Vec::with_capacity(ndim);
    let mut numel: usize = 1;
    for i in 0..ndim {
        let off = HEADER_LEN + 8 * i;
        let raw = bytes
            .get(off..off + 8)
            .ok_or_else(|| fail(bytes.len(), format!("truncated extent {i}")))?;
        let d = u64::from_le_bytes(raw.try_into().unwrap());
        if d == 0 {
            return Err(fail(off, format!("extent {i} is zero")));
        }
        let d = usize::try_from(d).map_err(|_| fail(off, "extent overflows usize"))?;
        numel = numel.checked_mul(d).ok_or_else(|| fail(off, "element count overflows"))?;
        dims.push(d);
    }
    let start = HEADER_LEN + 8 * ndim;
    let width = dtype.size_of();
    let expected = numel
        .checked_mul(width)
        .and_then(|n| n.checked_add(start))
        .ok_or_else(|| fail(start, "payload size overflows"))?;
    if bytes.len() < expected {
        return Err(fail(bytes.len(), format!("truncated payload, expected {expected} bytes total")));
    }
    if bytes.len() > expected {
        return Err(fail(expected, format!("{} trailing bytes", bytes.len() - expected)));
    }
    let mut data = Vec::with_capacity(numel);
    for (i, chunk) in bytes[start..].chunks_exact(width).enumerate() {
        let v = match dtype {
            DType::F32 => f32::from_le_bytes(chunk.try_into().unwrap()) as f64,
            DType::F64 => f64::from_le_bytes(chunk.try_into().unwrap()),
        };
        if !v.is_finite() {
            return Err(fail(start + i * width, "non-finite element"));
        }
        data.push(v);
    }
    Ok(Tensor::from_raw(dtype, dims, data))
}

pub fn write_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode(t)).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
