//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "LMIM" | u32 version | [u8; 32] config digest | u64 step
//! u32 tensor count
//! per tensor: u32 name length | name bytes | u8 dtype | u32 rank | u64 dims... | payload
//! u64 CRC-64/XZ of every byte between the header and the trailer
//! ```

use std::fs;
use std::path::Path;

use crc::{Crc, CRC_64_XZ};

use crate::error::{Error, Result};
use crate::ndtensor::{Element, Tensor};

pub const MAGIC: &[u8; 4] = b"LMIM";
pub const VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 32 + 8;
const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_XZ);

#[derive(Debug, Clone, PartialEq)]
pub enum TensorData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I64(Vec<i64>),
    U8(Vec<u8>),
}

impl TensorData {
    fn tag(&self) -> u8 {
        match self {
            TensorData::F32(_) => 0,
            TensorData::F64(_) => 1,
            TensorData::I64(_) => 2,
            TensorData::U8(_) => 3,
        }
    }

    fn len(&self) -> usize {
        match self {
            TensorData::F32(v) => v.len(),
            TensorData::F64(v) => v.len(),
            TensorData::I64(v) => v.len(),
            TensorData::U8(v) => v.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: TensorData,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub digest: [u8; 32],
    pub step: u64,
    pub tensors: Vec<NamedTensor>,
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| corrupt("truncated checkpoint"))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

impl Checkpoint {
    pub fn new(digest: [u8; 32], step: u64) -> Self {
        Checkpoint {
            digest,
            step,
            tensors: Vec::new(),
        }
    }

    pub fn push(&mut self, name: impl Into<String>, shape: Vec<usize>, data: TensorData) -> Result<()> {
        let name = name.into();
        if shape.iter().product::<usize>() != data.len() {
            return Err(corrupt(format!("tensor {name}: shape {shape:?} does not hold {} values", data.len())));
        }
        if self.tensors.iter().any(|t| t.name == name) {
            return Err(corrupt(format!("duplicate tensor name {name}")));
        }
        self.tensors.push(NamedTensor { name, shape, data });
        Ok(())
    }

    pub fn push_tensor<T: Element>(&mut self, name: impl Into<String>, t: &Tensor<T>) -> Result<()> {
        let data = match T::DTYPE {
            crate::ndtensor::DType::F32 => TensorData::F32(t.data().iter().map(|v| v.as_f64() as f32).collect()),
            crate::ndtensor::DType::F64 => TensorData::F64(t.data().iter().map(|v| v.as_f64()).collect()),
        };
        self.push(name, t.shape().to_vec(), data)
    }

    pub fn get(&self, name: &str) -> Option<&NamedTensor> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Float tensor by name, converted to `T`.
    pub fn tensor<T: Element>(&self, name: &str) -> Result<Tensor<T>> {
        let t = self.get(name).ok_or_else(|| corrupt(format!("missing tensor {name}")))?;
        let data: Vec<T> = match &t.data {
            TensorData::F32(v) => v.iter().map(|&x| T::lit(x as f64)).collect(),
            TensorData::F64(v) => v.iter().map(|&x| T::lit(x)).collect(),
            _ => return Err(corrupt(format!("tensor {name} is not floating point"))),
        };
        Tensor::new(t.shape.clone(), data)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.digest);
        out.extend_from_slice(&self.step.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            out.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.push(t.data.tag());
            out.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            match &t.data {
                TensorData::F32(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::F64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::I64(v) => v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes())),
                TensorData::U8(v) => out.extend_from_slice(v),
            }
        }
        let crc = CRC64.checksum(&out[HEADER_LEN..]);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        if buf.len() < HEADER_LEN + 4 + 8 || &buf[..4] != MAGIC {
            return Err(corrupt("not an LMIM checkpoint"));
        }
        let body_end = buf.len() - 8;
        let stored = u64::from_le_bytes(buf[body_end..].try_into().expect("8 bytes"));
        if CRC64.checksum(&buf[HEADER_LEN..body_end]) != stored {
            return Err(corrupt("checksum mismatch"));
        }
        let mut r = Reader {
            buf: &buf[..body_end],
            pos: 4,
        };
        let version = r.u32()?;
        if version != VERSION {
            return Err(corrupt(format!("unsupported format version {version}")));
        }
        let digest: [u8; 32] = r.take(32)?.try_into().expect("32 bytes");
        let step = r.u64()?;
        let count = r.u32()? as usize;
        let mut ck = Checkpoint::new(digest, step);
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = String::from_utf8(r.take(nlen)?.to_vec()).map_err(|_| corrupt("tensor name is not UTF-8"))?;
            let tag = r.u8()?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d)).ok_or_else(|| corrupt("tensor too large"))?;
            let data = match tag {
                0 => TensorData::F32(r.take(n * 4)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect()),
                1 => TensorData::F64(r.take(n * 8)?.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect()),
                2 => TensorData::I64(r.take(n * 8)?.chunks_exact(8).map(|c| i64::from_le_bytes(c.try_into().unwrap())).collect()),
                3 => TensorData::U8(r.take(n)?.to_vec()),
                t => return Err(corrupt(format!("unknown dtype tag {t}"))),
            };
            ck.push(name, shape, data)?;
        }
        if r.pos != body_end {
            return Err(corrupt("trailing bytes after the last tensor"));
        }
        Ok(ck)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&buf)
    }
}
