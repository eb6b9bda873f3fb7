//! Binary tensor container shared by checkpoints, patch sets and word tables.
//!
//! Layout: `XALN` magic, u32 LE version, u64 LE header length, JSON header
//! `{kind, tensors: [{name, shape, dtype}], meta}`, then each payload as raw
//! little-endian values in header order.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::{DType, Float, Tensor};

pub const MAGIC: &[u8; 4] = b"XALN";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub enum AnyTensor {
    F32(Tensor<f32>),
    F64(Tensor<f64>),
}

impl AnyTensor {
    pub fn shape(&self) -> &[usize] {
        match self {
            AnyTensor::F32(t) => t.shape(),
            AnyTensor::F64(t) => t.shape(),
        }
    }

    pub fn dtype(&self) -> DType {
        match self {
            AnyTensor::F32(_) => DType::F32,
            AnyTensor::F64(_) => DType::F64,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct Entry {
    name: String,
    shape: Vec<usize>,
    dtype: DType,
}

#[derive(Serialize, Deserialize)]
struct Header {
    kind: String,
    tensors: Vec<Entry>,
    meta: Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorFile {
    pub kind: String,
    pub meta: Value,
    tensors: Vec<(String, AnyTensor)>,
}

impl TensorFile {
    pub fn new(kind: impl Into<String>, meta: Value) -> Self {
        Self { kind: kind.into(), meta, tensors: Vec::new() }
    }

    pub fn push(&mut self, name: impl Into<String>, tensor: AnyTensor) -> Result<()> {
        let name = name.into();
        if self.tensors.iter().any(|(n, _)| *n == name) {
            return Err(Error::invalid(format!("duplicate tensor name {name}")));
        }
        self.tensors.push((name, tensor));
        Ok(())
    }

    pub fn push_f32(&mut self, name: impl Into<String>, tensor: Tensor<f32>) -> Result<()> {
        self.push(name, AnyTensor::F32(tensor))
    }

    pub fn tensors(&self) -> &[(String, AnyTensor)] {
        &self.tensors
    }

    pub fn get(&self, name: &str) -> Result<&AnyTensor> {
        self.tensors
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, t)| t)
            .ok_or_else(|| Error::invalid(format!("tensor {name} not present")))
    }

    pub fn get_f32(&self, name: &str) -> Result<Tensor<f32>> {
        match self.get(name)? {
            AnyTensor::F32(t) => Ok(t.clone()),
            AnyTensor::F64(t) => Ok(t.cast()),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            kind: self.kind.clone(),
            tensors: self
                .tensors
                .iter()
                .map(|(n, t)| Entry { name: n.clone(), shape: t.shape().to_vec(), dtype: t.dtype() })
                .collect(),
            meta: self.meta.clone(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::with_capacity(16 + json.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for (_, t) in &self.tensors {
            match t {
                AnyTensor::F32(t) => f32::extend_le_bytes(t.data(), &mut out),
                AnyTensor::F64(t) => f64::extend_le_bytes(t.data(), &mut out),
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |reason: &str| Error::Corrupt { path: path.to_owned(), reason: reason.to_owned() };
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(corrupt("missing magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != VERSION {
            return Err(Error::Version { found: version, expected: VERSION });
        }
        let header_len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
        let body = &bytes[16..];
        if body.len() < header_len {
            return Err(corrupt("truncated header"));
        }
        let header: Header =
            serde_json::from_slice(&body[..header_len]).map_err(|e| corrupt(&format!("bad header: {e}")))?;
        let mut payload = &body[header_len..];
        let mut file = TensorFile::new(header.kind, header.meta);
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            let tensor = match entry.dtype {
                DType::F32 => AnyTensor::F32(read_payload(&mut payload, n, entry.shape).ok_or_else(|| corrupt("truncated payload"))?),
                DType::F64 => AnyTensor::F64(read_payload(&mut payload, n, entry.shape).ok_or_else(|| corrupt("truncated payload"))?),
            };
            file.push(entry.name, tensor)?;
        }
        if !payload.is_empty() {
            return Err(corrupt("trailing bytes after payload"));
        }
        Ok(file)
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?, path)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }
}

fn read_payload<T: Float>(payload: &mut &[u8], n: usize, shape: Vec<usize>) -> Option<Tensor<T>> {
    let width = std::mem::size_of::<T>();
    let bytes = payload.get(..n * width)?;
    *payload = &payload[n * width..];
    let data = bytes.chunks_exact(width).map(T::from_le_chunk).collect();
    Tensor::new(shape, data).ok()
}

/// SHA-256 of the compact JSON encoding, hex encoded.
pub fn json_digest<S: Serialize>(value: &S) -> Result<String> {
    use sha2::{Digest, Sha256};
    Ok(hex::encode(Sha256::digest(serde_json::to_vec(value)?)))
}

/// Writes to a sibling temporary file, then renames over `path`.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp: PathBuf = path.to_owned();
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    tmp.set_file_name(format!(".{name}.{}.tmp", std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}
