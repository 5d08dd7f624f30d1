//! Flat little-endian tensor files.
//!
//! Layout: `b"NLT1"`, element code (`u8`), rank (`u8`), one `u32` per
//! dimension, then one `f64` per element regardless of the element code.
//! Element codes: 0 = F64, 1 = F32, 2 = Half, 3 = Half with wide accumulator.

use std::io::{Read, Write};

use super::precision::PrecisionMode;
use super::tensor::Tensor;
use super::NumericError;

pub const MAGIC: &[u8; 4] = b"NLT1";

fn element_code(p: PrecisionMode) -> u8 {
    match p {
        PrecisionMode::F64 => 0,
        PrecisionMode::F32 => 1,
        PrecisionMode::HALF => 2,
        _ => 3,
    }
}

fn precision_from_code(code: u8) -> Option<PrecisionMode> {
    match code {
        0 => Some(PrecisionMode::F64),
        1 => Some(PrecisionMode::F32),
        2 => Some(PrecisionMode::HALF),
        3 => Some(PrecisionMode::HALF_WIDE),
        _ => None,
    }
}

pub fn write_tensor<W: Write>(mut w: W, tensor: &Tensor) -> Result<(), NumericError> {
    if tensor.rank() > u8::MAX as usize {
        return Err(NumericError::ShapeMismatch("rank exceeds 255".into()));
    }
    let mut buf = Vec::with_capacity(6 + 4 * tensor.rank() + 8 * tensor.len());
    buf.extend_from_slice(MAGIC);
    buf.push(element_code(tensor.precision()));
    buf.push(tensor.rank() as u8);
    for &d in tensor.shape() {
        let d = u32::try_from(d).map_err(|_| NumericError::ShapeMismatch(format!("dimension {d} exceeds u32")))?;
        buf.extend_from_slice(&d.to_le_bytes());
    }
    for v in tensor.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_tensor<R: Read>(mut r: R) -> Result<Tensor, NumericError> {
    let mut bytes = Vec::new();
    r.read_to_end(&mut bytes)?;
    decode_tensor(&bytes)
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor, NumericError> {
    let take = |offset: usize, len: usize| {
        bytes.get(offset..offset + len).ok_or(NumericError::Format { offset, message: "unexpected end of data".into() })
    };
    if take(0, 4)? != MAGIC {
        return Err(NumericError::Format { offset: 0, message: "bad magic, expected NLT1".into() });
    }
    let code = take(4, 1)?[0];
    let precision = precision_from_code(code)
        .ok_or(NumericError::Format { offset: 4, message: format!("unknown element code {code}") })?;
    let rank = take(5, 1)?[0] as usize;
    let mut offset = 6;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let raw = take(offset, 4)?;
        shape.push(u32::from_le_bytes(raw.try_into().expect("4 bytes")) as usize);
        offset += 4;
    }
    let count: usize = shape.iter().product();
    let mut data = Vec::with_capacity(count);
    for _ in 0..count {
        let raw = take(offset, 8)?;
        data.push(f64::from_le_bytes(raw.try_into().expect("8 bytes")));
        offset += 8;
    }
    if offset != bytes.len() {
        return Err(NumericError::Format { offset, message: "trailing bytes after payload".into() });
    }
    Tensor::new(shape, data, precision)
}
