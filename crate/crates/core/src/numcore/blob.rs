//! `QTNS` tensor blob encoding.
//!
//! Layout: magic `QTNS`, format version (u32), dtype code (u8), rank (u8),
//! one u64 per dimension, then the values. Every integer and value is
//! little-endian.

use super::{DType, Scalar, Tensor};
use crate::error::{Error, Result};

pub const BLOB_MAGIC: &[u8; 4] = b"QTNS";
pub const BLOB_VERSION: u32 = 1;

pub fn encode_tensor<T: Scalar>(t: &Tensor<T>, out: &mut Vec<u8>) {
    out.extend_from_slice(BLOB_MAGIC);
    out.extend_from_slice(&BLOB_VERSION.to_le_bytes());
    out.push(T::DTYPE.code());
    out.push(t.rank() as u8);
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    out.reserve(t.numel() * T::DTYPE.width());
    for &v in t.data() {
        v.write_le(out);
    }
}

pub fn tensor_to_bytes<T: Scalar>(t: &Tensor<T>) -> Vec<u8> {
    let mut out = Vec::new();
    encode_tensor(t, &mut out);
    out
}

fn take<'a>(bytes: &'a [u8], pos: &mut usize, n: usize) -> Result<&'a [u8]> {
    let end = pos
        .checked_add(n)
        .filter(|&e| e <= bytes.len())
        .ok_or_else(|| Error::Integrity(format!("tensor blob truncated at byte {}", *pos)))?;
    let s = &bytes[*pos..end];
    *pos = end;
    Ok(s)
}

/// Decodes one tensor from the front of `bytes`, returning it with the
/// number of bytes consumed. The stored dtype must match `T`.
pub fn decode_tensor<T: Scalar>(bytes: &[u8]) -> Result<(Tensor<T>, usize)> {
    let mut pos = 0;
    if take(bytes, &mut pos, 4)? != BLOB_MAGIC {
        return Err(Error::Integrity("bad tensor blob magic".into()));
    }
    let version = u32::from_le_bytes(take(bytes, &mut pos, 4)?.try_into().unwrap());
    if version != BLOB_VERSION {
        return Err(Error::Version {
            found: version,
            expected: BLOB_VERSION,
        });
    }
    let code = take(bytes, &mut pos, 1)?[0];
    let dtype = DType::from_code(code)
        .ok_or_else(|| Error::Integrity(format!("unknown dtype code {code}")))?;
    if dtype != T::DTYPE {
        return Err(Error::Input(format!(
            "blob holds {dtype:?}, expected {:?}",
            T::DTYPE
        )));
    }
    let rank = take(bytes, &mut pos, 1)?[0] as usize;
    let mut shape = Vec::with_capacity(rank);
    for _ in 0..rank {
        let d = u64::from_le_bytes(take(bytes, &mut pos, 8)?.try_into().unwrap());
        shape.push(usize::try_from(d).map_err(|_| Error::Integrity("dimension overflow".into()))?);
    }
    let n: usize = shape.iter().product();
    let w = dtype.width();
    let raw = take(bytes, &mut pos, n.checked_mul(w).ok_or_else(|| Error::Integrity("size overflow".into()))?)?;
    let data = raw.chunks_exact(w).map(T::read_le).collect();
    Ok((Tensor::new(shape, data)?, pos))
}
