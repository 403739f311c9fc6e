//! Named tensor collection and its binary file format.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      4 bytes   "CATW"
//! version    u32       currently 1
//! count      u32       number of entries
//! entry*     repeated `count` times, sorted by name:
//!   name_len   u16
//!   name       name_len bytes, UTF-8
//!   rank       u8
//!   dims       rank x u32
//!   precision  u8      0 = fp32, 1 = fp16
//!   values     product(dims) x (f32 LE | binary16 bits LE)
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use super::{
    f16_bits_to_f32, f32_to_f16_bits, Activation, BatchNormParams, Linear, Precision, Tensor,
};
use crate::error::{Error, Result};

pub const WEIGHT_FILE_MAGIC: &[u8; 4] = b"CATW";
pub const WEIGHT_FILE_VERSION: u32 = 1;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    tensors: BTreeMap<String, Tensor>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) {
        self.tensors.insert(name.into(), tensor);
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        self.tensors.remove(name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.tensors.contains_key(name)
    }

    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.tensors.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// `<prefix>.weight` and `<prefix>.bias` as a linear layer.
    pub fn linear(&self, prefix: &str, activation: Activation) -> Result<Linear> {
        let weight = self.require(&format!("{prefix}.weight"))?.clone();
        let bias = self.require(&format!("{prefix}.bias"))?.clone();
        Ok(Linear {
            weight,
            bias,
            activation,
        })
    }

    /// Batch-norm parameters under `<prefix>.{gamma,beta,mean,var}`, if present.
    pub fn batch_norm(&self, prefix: &str) -> Result<Option<BatchNormParams>> {
        if !self.contains(&format!("{prefix}.gamma")) {
            return Ok(None);
        }
        let get = |k: &str| self.require(&format!("{prefix}.{k}")).cloned();
        Ok(Some(BatchNormParams {
            gamma: get("gamma")?,
            beta: get("beta")?,
            mean: get("mean")?,
            var: get("var")?,
        }))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(WEIGHT_FILE_MAGIC);
        out.extend_from_slice(&WEIGHT_FILE_VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u16).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(t.rank() as u8);
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            match t.precision() {
                Precision::Fp32 => {
                    out.push(0);
                    for v in t.data() {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                Precision::Fp16E => {
                    out.push(1);
                    for &v in t.data() {
                        out.extend_from_slice(&f32_to_f16_bits(v).to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8], path: &Path) -> Result<Self> {
        let mut r = Reader {
            bytes,
            pos: 0,
            path,
        };
        if r.take(4)? != WEIGHT_FILE_MAGIC {
            return Err(r.err("bad magic"));
        }
        let version = r.u32()?;
        if version != WEIGHT_FILE_VERSION {
            return Err(r.err(format!("unsupported version {version}")));
        }
        let count = r.u32()?;
        let mut store = WeightStore::new();
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| r.err("tensor name is not UTF-8"))?
                .to_string();
            let rank = r.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let len: usize = shape.iter().product();
            let tensor = match r.take(1)?[0] {
                0 => {
                    let raw = r.take(len * 4)?;
                    let data = raw
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                        .collect();
                    Tensor::from_parts(shape, data, Precision::Fp32)
                }
                1 => {
                    let raw = r.take(len * 2)?;
                    let data = raw
                        .chunks_exact(2)
                        .map(|c| f16_bits_to_f32(u16::from_le_bytes([c[0], c[1]])))
                        .collect();
                    Tensor::from_parts(shape, data, Precision::Fp16E)
                }
                p => return Err(r.err(format!("unknown precision tag {p} for `{name}`"))),
            };
            store.insert(name, tensor);
        }
        if r.pos != bytes.len() {
            return Err(r.err("trailing bytes after last entry"));
        }
        Ok(store)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes, path)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::format(
            "weight file",
            self.path,
            format!("{} (offset {})", msg.into(), self.pos),
        )
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(self.err("unexpected end of file"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        let b = self.take(2)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}
