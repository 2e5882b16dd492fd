//! `NTCW` weight files: every named tensor of a network, including
//! BatchNorm running statistics.
//!
//! ```text
//! "NTCW" version:u32
//! repeated until end of file:
//!   name_len:u32 name[name_len] rank:u32 dims:u32[rank] values:f32[prod(dims)]
//! ```
//!
//! All integers and floats are little-endian. Tensors are stored at rank 5.

use std::path::Path;

use crate::data::Reader;
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

pub const NTCW_MAGIC: &[u8; 4] = b"NTCW";
pub const NTCW_VERSION: u32 = 1;
const RANK: usize = 5;

pub fn encode_weights<S: Scalar>(tensors: &[(String, Tensor<S>)]) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(NTCW_MAGIC);
    out.extend_from_slice(&NTCW_VERSION.to_le_bytes());
    for (name, t) in tensors {
        let len = u32::try_from(name.len()).map_err(|_| Error::config(format!("tensor name of {} bytes", name.len())))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(RANK as u32).to_le_bytes());
        for d in t.shape().dims() {
            let d = u32::try_from(d).map_err(|_| Error::config(format!("dimension {d} of {name:?} exceeds 32 bits")))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.as_f32().to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_weights(bytes: &[u8]) -> Result<Vec<(String, Tensor<f32>)>> {
    let mut r = Reader::new(bytes, "NTCW");
    let magic = r.take(4, "magic")?;
    if magic != NTCW_MAGIC {
        return Err(r.error_at(0, format!("bad magic {magic:?}, expected \"NTCW\"")));
    }
    let version = r.u32("version")?;
    if version != NTCW_VERSION {
        return Err(r.error_at(4, format!("unsupported version {version}, expected {NTCW_VERSION}")));
    }
    let mut out = Vec::new();
    while r.remaining() > 0 {
        let start = r.offset();
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| r.error_at(start + 4, "tensor name is not UTF-8".into()))?
            .to_string();
        let rank_at = r.offset();
        let rank = r.u32("rank")? as usize;
        if rank != RANK {
            return Err(r.error_at(rank_at, format!("tensor {name:?} has rank {rank}, expected {RANK}")));
        }
        let mut dims = [0usize; RANK];
        for d in &mut dims {
            *d = r.u32("dimension")? as usize;
        }
        let shape = Shape::new(dims[0], dims[1], dims[2], dims[3], dims[4]);
        let count = dims
            .iter()
            .try_fold(1usize, |a, &d| a.checked_mul(d))
            .and_then(|n| n.checked_mul(4))
            .ok_or_else(|| r.error_at(rank_at, format!("tensor {name:?} dimensions overflow")))?;
        let raw = r.take(count, "tensor values")?;
        let values: Vec<f32> = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        if values.iter().any(|v| !v.is_finite()) {
            return Err(r.error_at(rank_at, format!("tensor {name:?} holds non-finite values")));
        }
        out.push((name, Tensor::from_vec(shape, values)?));
    }
    Ok(out)
}

pub fn write_weights<S: Scalar>(path: &Path, tensors: &[(String, Tensor<S>)]) -> Result<()> {
    std::fs::write(path, encode_weights(tensors)?).map_err(|e| Error::io(path, e))
}

pub fn read_weights(path: &Path) -> Result<Vec<(String, Tensor<f32>)>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_weights(&bytes)
}
