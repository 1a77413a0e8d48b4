//! Checkpoint files.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! "MDDC" | u32 version | u64 metadata length | metadata (key=value text)
//! u32 array count
//! per array: u32 name length | name | u32 ndim | u32 dims... | f32 data...
//! ```

use std::io::{Read, Write};
use std::path::Path;

use crate::error::{Error, Result};
use crate::kv::KvMap;
use crate::tensor::Tensor;

use super::{Denoiser, DenoiserConfig};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MDDC";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub metadata: KvMap,
    pub arrays: Vec<(String, Tensor<f32>)>,
}

impl Checkpoint {
    /// Snapshot of `model`; `extra` metadata (schedule, scheme, provenance)
    /// is appended after the architecture keys.
    pub fn from_model(model: &Denoiser<f32>, extra: &KvMap) -> Self {
        let mut metadata = model.config().to_kv();
        metadata.extend(extra);
        let arrays = model
            .params()
            .names()
            .iter()
            .cloned()
            .zip(model.params().values().iter().cloned())
            .collect();
        Self { metadata, arrays }
    }

    pub fn to_model(&self) -> Result<Denoiser<f32>> {
        let config = DenoiserConfig::from_kv(&self.metadata)?;
        let mut model = Denoiser::new(config)?;
        model.load_params(self.arrays.clone())?;
        Ok(model)
    }

    pub fn write_to(&self, w: &mut impl Write) -> Result<()> {
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        let meta = self.metadata.to_text();
        w.write_all(&(meta.len() as u64).to_le_bytes())?;
        w.write_all(meta.as_bytes())?;
        w.write_all(&(self.arrays.len() as u32).to_le_bytes())?;
        for (name, t) in &self.arrays {
            w.write_all(&(name.len() as u32).to_le_bytes())?;
            w.write_all(name.as_bytes())?;
            w.write_all(&(t.shape().len() as u32).to_le_bytes())?;
            for &d in t.shape() {
                w.write_all(&(d as u32).to_le_bytes())?;
            }
            let mut buf = Vec::with_capacity(t.len() * 4);
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        self.write_to(&mut out).expect("writing to memory");
        out
    }

    pub fn read_from(r: &mut impl Read) -> Result<Self> {
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(Error::format("not a checkpoint (bad magic)"));
        }
        let version = read_u32(r)?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::Version {
                kind: "checkpoint",
                found: version,
                supported: CHECKPOINT_VERSION,
            });
        }
        let meta_len = read_u64(r)? as usize;
        let meta = read_string(r, meta_len)?;
        let metadata = KvMap::from_text(&meta)?;
        let count = read_u32(r)? as usize;
        let mut arrays = Vec::with_capacity(count);
        for _ in 0..count {
            let name_len = read_u32(r)? as usize;
            let name = read_string(r, name_len)?;
            let ndim = read_u32(r)? as usize;
            let shape = (0..ndim).map(|_| read_u32(r).map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let n: usize = shape.iter().product();
            let mut buf = vec![0u8; n * 4];
            r.read_exact(&mut buf)?;
            let data = buf.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
            arrays.push((name, Tensor::from_vec(&shape, data)?));
        }
        Ok(Self { metadata, arrays })
    }

    pub fn from_bytes(mut bytes: &[u8]) -> Result<Self> {
        Self::read_from(&mut bytes)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let bytes = std::fs::read(path)?;
        Self::from_bytes(&bytes)
    }
}

pub(crate) fn read_u32(r: &mut impl Read) -> Result<u32> {
    let mut b = [0u8; 4];
    r.read_exact(&mut b)?;
    Ok(u32::from_le_bytes(b))
}

pub(crate) fn read_u64(r: &mut impl Read) -> Result<u64> {
    let mut b = [0u8; 8];
    r.read_exact(&mut b)?;
    Ok(u64::from_le_bytes(b))
}

pub(crate) fn read_string(r: &mut impl Read, len: usize) -> Result<String> {
    let mut b = vec![0u8; len];
    r.read_exact(&mut b)?;
    String::from_utf8(b).map_err(|_| Error::format("invalid UTF-8 text block"))
}
