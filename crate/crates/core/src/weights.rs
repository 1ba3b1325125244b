//! Named tensor store and its binary container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "M2AE"            4 bytes magic
//! version           u32 (= 1)
//! entry count       u64
//! per entry:
//!   name length     u32
//!   name            UTF-8 bytes
//!   dtype           u8 (0 = f32)
//!   ndim            u32
//!   dims            u64 × ndim
//!   data            f32 × product(dims)
//! ```
//!
//! An empty store is the 16-byte header alone.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"M2AE";
pub const VERSION: u32 = 1;
pub const HEADER_BYTES: usize = 16;
const DTYPE_F32: u8 = 0;

/// Tensors by dotted name, e.g. `enc4.block0.dw.weight`.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WeightStore {
    tensors: BTreeMap<String, Tensor>,
}

impl WeightStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Option<Tensor> {
        self.tensors.insert(name.into(), t)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    /// Fetch a tensor, failing with its name if absent.
    pub fn require(&self, name: &str) -> Result<&Tensor> {
        self.get(name).ok_or_else(|| Error::MissingWeight(name.to_string()))
    }

    /// Like [`require`](Self::require), also checking the dims.
    pub fn require_dims(&self, name: &str, dims: &[usize]) -> Result<&Tensor> {
        let t = self.require(name)?;
        if t.dims() != dims {
            return Err(Error::shape(format!("weight {name} has dims {:?}, expected {dims:?}", t.dims())));
        }
        Ok(t)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.tensors.iter()
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.tensors.get_mut(name)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(HEADER_BYTES + self.tensors.values().map(|t| t.len() * 4 + 64).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for (name, t) in &self.tensors {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(DTYPE_F32);
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.dims() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic = r.take(4)?;
        if magic != MAGIC {
            return Err(Error::Format { offset: 0, msg: "bad magic, expected \"M2AE\"".into() });
        }
        let at = r.pos as u64;
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Format { offset: at, msg: format!("unsupported version {version}") });
        }
        let count = r.u64()?;
        let mut store = Self::new();
        for _ in 0..count {
            let at = r.pos as u64;
            let len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(len)?)
                .map_err(|_| Error::Format { offset: at, msg: "tensor name is not UTF-8".into() })?
                .to_string();
            let at = r.pos as u64;
            let dtype = r.take(1)?[0];
            if dtype != DTYPE_F32 {
                return Err(Error::Format { offset: at, msg: format!("unsupported dtype {dtype} for {name}") });
            }
            let ndim = r.u32()? as usize;
            let mut dims = Vec::with_capacity(ndim.min(16));
            for _ in 0..ndim {
                let at = r.pos as u64;
                let d = usize::try_from(r.u64()?).map_err(|_| Error::Format { offset: at, msg: "dimension overflows usize".into() })?;
                dims.push(d);
            }
            let at = r.pos as u64;
            let n = dims
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| Error::Format { offset: at, msg: format!("{name}: element count overflows") })?;
            let raw = r.take(n)?;
            let data = raw.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            let t = Tensor::new(dims, data)?;
            if store.insert(name.clone(), t).is_some() {
                return Err(Error::Format { offset: at, msg: format!("duplicate tensor name {name}") });
            }
        }
        if r.pos != bytes.len() {
            return Err(Error::Format { offset: r.pos as u64, msg: "trailing bytes after last entry".into() });
        }
        Ok(store)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format { offset: self.pos as u64, msg: format!("truncated: needed {n} more bytes") });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn load_weights(path: impl AsRef<Path>) -> Result<WeightStore> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    WeightStore::from_bytes(&bytes).map_err(|e| match e {
        Error::Format { offset, msg } => Error::Format { offset, msg: format!("{}: {msg}", path.display()) },
        other => other,
    })
}

pub fn save_weights(store: &WeightStore, path: impl AsRef<Path>) -> Result<()> {
    crate::image::write_atomic(path.as_ref(), &store.to_bytes())
}
