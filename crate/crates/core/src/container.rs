//! The MEXT1 tensor container.
//!
//! ```text
//! "MEXT1" | u32 LE header length | JSON header | raw little-endian tensor data
//! ```
//!
//! The header is `{"meta": {...}, "tensors": [{name, ownership, shape,
//! dtype, byte_offset}, ...]}`; offsets are relative to the first byte after
//! the header and tensors are stored back to back in header order.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::tensor::{DType, Scalar, Tensor};

pub const MAGIC: &[u8; 5] = b"MEXT1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub name: String,
    pub ownership: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub byte_offset: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorHeader>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Entry {
    pub name: String,
    pub ownership: String,
    pub shape: Vec<usize>,
    pub dtype: DType,
    pub bytes: Vec<u8>,
}

impl Entry {
    pub fn from_tensor<T: Scalar>(name: &str, ownership: &str, t: &Tensor<T>) -> Self {
        let mut bytes = Vec::with_capacity(t.len() * T::DTYPE.size());
        for &v in t.data() {
            v.write_le(&mut bytes);
        }
        Self {
            name: name.to_string(),
            ownership: ownership.to_string(),
            shape: t.shape().to_vec(),
            dtype: T::DTYPE,
            bytes,
        }
    }

    pub fn u32(name: &str, ownership: &str, shape: Vec<usize>, values: &[u32]) -> Self {
        Self {
            name: name.to_string(),
            ownership: ownership.to_string(),
            shape,
            dtype: DType::U32,
            bytes: values.iter().flat_map(|v| v.to_le_bytes()).collect(),
        }
    }

    pub fn as_u32(&self) -> Result<Vec<u32>> {
        if self.dtype != DType::U32 {
            bail!(Data, "{} is {:?}, expected u32", self.name, self.dtype);
        }
        Ok(self
            .bytes
            .chunks_exact(4)
            .map(|c| u32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect())
    }

    /// Decodes a float tensor into `T`, converting between f32 and f64.
    pub fn to_tensor<T: Scalar>(&self) -> Result<Tensor<T>> {
        let data: Vec<T> = match self.dtype {
            DType::F32 => self
                .bytes
                .chunks_exact(4)
                .map(|c| T::from_f64_lossy(f32::read_le(c) as f64))
                .collect(),
            DType::F64 => self
                .bytes
                .chunks_exact(8)
                .map(|c| T::from_f64_lossy(f64::read_le(c)))
                .collect(),
            DType::U32 => bail!(Checkpoint, "{} holds integers, not floats", self.name),
        };
        Tensor::new(self.shape.clone(), data).map_err(|e| Error::Checkpoint(e.to_string()))
    }
}

pub fn encode(meta: &serde_json::Value, entries: &[Entry]) -> Vec<u8> {
    let mut offset = 0;
    let tensors = entries
        .iter()
        .map(|e| {
            let h = TensorHeader {
                name: e.name.clone(),
                ownership: e.ownership.clone(),
                shape: e.shape.clone(),
                dtype: e.dtype,
                byte_offset: offset,
            };
            offset += e.bytes.len();
            h
        })
        .collect();
    let header = serde_json::to_vec(&Header {
        meta: meta.clone(),
        tensors,
    })
    .expect("header serializes");
    let mut out = Vec::with_capacity(MAGIC.len() + 4 + header.len() + offset);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&(header.len() as u32).to_le_bytes());
    out.extend_from_slice(&header);
    for e in entries {
        out.extend_from_slice(&e.bytes);
    }
    out
}

pub fn decode(bytes: &[u8]) -> Result<(serde_json::Value, Vec<Entry>)> {
    if bytes.len() < 9 || &bytes[..5] != MAGIC {
        bail!(Checkpoint, "not a MEXT1 container");
    }
    let hlen = u32::from_le_bytes([bytes[5], bytes[6], bytes[7], bytes[8]]) as usize;
    let body_start = 9 + hlen;
    if bytes.len() < body_start {
        bail!(Checkpoint, "truncated header");
    }
    let header: Header = serde_json::from_slice(&bytes[9..body_start])
        .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
    let body = &bytes[body_start..];
    let mut entries = Vec::with_capacity(header.tensors.len());
    for t in header.tensors {
        let n: usize = t.shape.iter().product::<usize>() * t.dtype.size();
        let end = t.byte_offset + n;
        if end > body.len() {
            bail!(Checkpoint, "tensor {} runs past the end of the file", t.name);
        }
        entries.push(Entry {
            bytes: body[t.byte_offset..end].to_vec(),
            name: t.name,
            ownership: t.ownership,
            shape: t.shape,
            dtype: t.dtype,
        });
    }
    Ok((header.meta, entries))
}

pub fn write(path: &Path, meta: &serde_json::Value, entries: &[Entry]) -> Result<()> {
    std::fs::write(path, encode(meta, entries)).map_err(|e| Error::io(path, e))
}

pub fn read(path: &Path) -> Result<(serde_json::Value, Vec<Entry>)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn layout_on_disk() {
        let t = Tensor::<f32>::new(vec![2], vec![1.0, -2.5]).unwrap();
        let bytes = encode(&serde_json::json!({}), &[Entry::from_tensor("w", "final_classifier", &t)]);
        assert_eq!(&bytes[..5], b"MEXT1");
        let hlen = u32::from_le_bytes(bytes[5..9].try_into().unwrap()) as usize;
        let header: serde_json::Value = serde_json::from_slice(&bytes[9..9 + hlen]).unwrap();
        assert_eq!(header["tensors"][0]["dtype"], "f32");
        assert_eq!(header["tensors"][0]["byte_offset"], 0);
        assert_eq!(&bytes[9 + hlen..], &[0, 0, 128, 63, 0, 0, 32, 192]);
    }

    #[test]
    fn rejects_garbage() {
        assert!(matches!(decode(b"NOPE1\0\0\0\0"), Err(Error::Checkpoint(_))));
        let mut bytes = encode(&serde_json::json!({}), &[Entry::u32("x", "data", vec![3], &[1, 2, 3])]);
        bytes.truncate(bytes.len() - 1);
        assert!(decode(&bytes).is_err());
    }
}
