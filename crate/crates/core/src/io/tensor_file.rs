//! Binary tensor container.
//!
//! Layout (all little-endian):
//!   magic   4 bytes  "NRTB"
//!   version u32      1
//!   dtype   u8       0 = 32-bit float
//!   ndim    u8
//!   dims    ndim x u64
//!   payload 4 * product(dims) bytes, row-major
//!
//! Unknown versions or dtypes are rejected, as is any payload whose
//! length disagrees with the dims.

use std::path::Path;

use super::atomic_write;
use crate::error::{CoreError, CoreResult};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"NRTB";
pub const VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

pub fn encode_tensor(t: &Tensor) -> CoreResult<Vec<u8>> {
    let ndim = t.shape().len();
    if ndim > u8::MAX as usize {
        return Err(CoreError::Format(format!("tensor rank {ndim} exceeds format limit")));
    }
    let mut out = Vec::with_capacity(4 + 4 + 1 + 1 + 8 * ndim + 4 * t.numel());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.push(DTYPE_F32);
    out.push(ndim as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    Ok(out)
}

pub fn decode_tensor(bytes: &[u8]) -> CoreResult<Tensor> {
    let header_err = |what: &str| CoreError::Format(format!("tensor file: {what}"));
    if bytes.len() < 10 {
        return Err(header_err("truncated header"));
    }
    if &bytes[0..4] != MAGIC {
        return Err(header_err("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
    if version != VERSION {
        return Err(header_err(&format!("unsupported version {version}")));
    }
    let dtype = bytes[8];
    if dtype != DTYPE_F32 {
        return Err(header_err(&format!("unsupported dtype {dtype}")));
    }
    let ndim = bytes[9] as usize;
    let dims_end = 10 + 8 * ndim;
    if bytes.len() < dims_end {
        return Err(header_err("truncated dims"));
    }
    let mut shape = Vec::with_capacity(ndim);
    for i in 0..ndim {
        let d = u64::from_le_bytes(bytes[10 + 8 * i..18 + 8 * i].try_into().expect("8 bytes"));
        if d == 0 {
            return Err(header_err("zero dimension"));
        }
        shape.push(d as usize);
    }
    let numel: usize = shape.iter().product();
    let payload = &bytes[dims_end..];
    if payload.len() != 4 * numel {
        return Err(header_err(&format!(
            "payload {} bytes, dims imply {}",
            payload.len(),
            4 * numel
        )));
    }
    let mut data = Vec::with_capacity(numel);
    for chunk in payload.chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().expect("4 bytes")));
    }
    Tensor::new(shape, data)
}

pub fn write_tensor(path: &Path, t: &Tensor) -> CoreResult<()> {
    atomic_write(path, &encode_tensor(t)?)
}

pub fn read_tensor(path: &Path) -> CoreResult<Tensor> {
    let bytes = std::fs::read(path)
        .map_err(|e| CoreError::Format(format!("{}: {e}", path.display())))?;
    decode_tensor(&bytes)
        .map_err(|e| CoreError::Format(format!("{}: {e}", path.display())))
}
