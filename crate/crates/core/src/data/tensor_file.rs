//! Binary tensor container: 8 magic bytes `IITNSR01`, u32 LE rank, rank u32
//! LE extents, then f32 LE values in row-major order.

use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::numerics::Tensor;

pub const MAGIC: &[u8; 8] = b"IITNSR01";

pub fn encode_tensor(t: &Tensor) -> Result<Vec<u8>> {
    let mut bytes = Vec::with_capacity(12 + 4 * t.dims().len() + 4 * t.numel());
    bytes.extend_from_slice(MAGIC);
    bytes.extend_from_slice(&(t.dims().len() as u32).to_le_bytes());
    for &d in t.dims() {
        let d = u32::try_from(d).map_err(|_| Error::DimensionOverflow(format!("extent {d}")))?;
        bytes.extend_from_slice(&d.to_le_bytes());
    }
    for &v in t.data() {
        let f = v as f32;
        if !f.is_finite() {
            return Err(Error::NonFinite(format!("{v} is not representable as f32")));
        }
        bytes.extend_from_slice(&f.to_le_bytes());
    }
    Ok(bytes)
}

fn read_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes
        .get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().unwrap()))
        .ok_or(Error::Truncated {
            expected: at + 4,
            found: bytes.len(),
        })
}

pub fn decode_tensor(bytes: &[u8]) -> Result<Tensor> {
    if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::BadMagic);
    }
    let rank = read_u32(bytes, 8)? as usize;
    if rank == 0 || rank > 3 {
        return Err(Error::DimensionOverflow(format!("rank {rank}")));
    }
    let mut dims = Vec::with_capacity(rank);
    for i in 0..rank {
        dims.push(read_u32(bytes, 12 + 4 * i)? as usize);
    }
    let header = 12 + 4 * rank;
    let payload = dims
        .iter()
        .try_fold(1usize, |acc, &d| acc.checked_mul(d))
        .and_then(|n| n.checked_mul(4))
        .and_then(|n| n.checked_add(header))
        .ok_or_else(|| Error::DimensionOverflow(format!("{dims:?}")))?;
    if bytes.len() < payload {
        return Err(Error::Truncated {
            expected: payload,
            found: bytes.len(),
        });
    }
    if bytes.len() > payload {
        return Err(Error::TrailingData(bytes.len() - payload));
    }
    let data = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(data, &dims)
}

pub fn save_tensor(path: impl AsRef<Path>, t: &Tensor) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_tensor(t)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_tensor(&bytes)
}
