//! Named-tensor checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "ECPT"  u32 count
//! repeat count times:
//!   u32 name_len, name (UTF-8), u32 rank, rank × u32 extents, numel × f32
//! ```

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use super::tensor::{Scalar, Tensor};
use crate::error::{Error, Result};
use crate::io_util::{read_exact_or_format, read_u32, write_atomic};

pub const MAGIC: &[u8; 4] = b"ECPT";

/// Encode named tensors, in name order. Values are stored as `f32`.
pub fn encode<T: Scalar>(tensors: &BTreeMap<String, Tensor<T>>) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &e in t.shape() {
            out.extend_from_slice(&(e as u32).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v.as_f64() as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode<T: Scalar>(mut bytes: &[u8]) -> Result<BTreeMap<String, Tensor<T>>> {
    let r = &mut bytes;
    let mut magic = [0u8; 4];
    read_exact_or_format(r, &mut magic, "checkpoint magic")?;
    if &magic != MAGIC {
        return Err(Error::format("not a ECPT checkpoint (bad magic)"));
    }
    let count = read_u32(r)? as usize;
    let mut out = BTreeMap::new();
    for _ in 0..count {
        let name_len = read_u32(r)? as usize;
        if name_len > r.len() {
            return Err(Error::format("checkpoint truncated in tensor name"));
        }
        let mut name = vec![0u8; name_len];
        read_exact_or_format(r, &mut name, "tensor name")?;
        let name = String::from_utf8(name).map_err(|_| Error::format("tensor name is not UTF-8"))?;
        let rank = read_u32(r)? as usize;
        if rank == 0 || rank > 8 {
            return Err(Error::format(format!("tensor {name:?}: unsupported rank {rank}")));
        }
        let shape = (0..rank).map(|_| read_u32(r).map(|e| e as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        if numel.checked_mul(4).is_none_or(|b| b > r.len()) {
            return Err(Error::format(format!("tensor {name:?}: payload truncated")));
        }
        let mut data = Vec::with_capacity(numel);
        let mut buf = [0u8; 4];
        for _ in 0..numel {
            r.read_exact(&mut buf).map_err(|_| Error::format("payload truncated"))?;
            data.push(T::from_f64(f32::from_le_bytes(buf) as f64));
        }
        let t = Tensor::new(shape, data).map_err(|e| Error::format(e.to_string()))?;
        if out.insert(name.clone(), t).is_some() {
            return Err(Error::format(format!("duplicate tensor {name:?}")));
        }
    }
    if !r.is_empty() {
        return Err(Error::format("trailing bytes after checkpoint"));
    }
    Ok(out)
}

pub fn save<T: Scalar>(path: &Path, tensors: &BTreeMap<String, Tensor<T>>) -> Result<()> {
    write_atomic(path, &encode(tensors))
}

pub fn load<T: Scalar>(path: &Path) -> Result<BTreeMap<String, Tensor<T>>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}
