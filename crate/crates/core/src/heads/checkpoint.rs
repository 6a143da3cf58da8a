//! Binary checkpoint container.
//!
//! Layout, all integers little-endian:
//! `"DRCK"`, `u32` version, `u32` header length, JSON header with the model
//! config, `u32` tensor count, then per tensor `u32` name length, UTF-8 name,
//! `u32` rank, `u64` dims, and `f64` data.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{ModelConfig, RegressionModel};
use crate::autodiff::{ParamStore, Tensor};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"DRCK";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Header {
    config: ModelConfig,
}

fn u32_len(n: usize, what: &str) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Config(format!("{what} too large for checkpoint")))
}

pub fn save_checkpoint(model: &RegressionModel, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    let header = serde_json::to_vec(&Header { config: model.config().clone() })
        .map_err(|e| Error::Config(format!("cannot serialize model config: {e}")))?;
    buf.extend_from_slice(&u32_len(header.len(), "header")?.to_le_bytes());
    buf.extend_from_slice(&header);
    buf.extend_from_slice(&u32_len(model.params().len(), "tensor count")?.to_le_bytes());
    for (name, t) in model.params().iter() {
        buf.extend_from_slice(&u32_len(name.len(), "name")?.to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&u32_len(t.shape().len(), "rank")?.to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::File::create(path)?.write_all(&buf)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Codec(format!("checkpoint truncated at byte {}", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn load_checkpoint(path: &Path) -> Result<RegressionModel> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    let mut c = Cursor { bytes: &bytes, pos: 0 };
    if c.take(4)? != MAGIC {
        return Err(Error::Codec("not a checkpoint file (bad magic)".into()));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Codec(format!("unsupported checkpoint version {version}")));
    }
    let len = c.u32()? as usize;
    let header: Header = serde_json::from_slice(c.take(len)?)
        .map_err(|e| Error::Codec(format!("bad checkpoint header: {e}")))?;
    let count = c.u32()?;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let n = c.u32()? as usize;
        let name = String::from_utf8(c.take(n)?.to_vec())
            .map_err(|_| Error::Codec("tensor name is not UTF-8".into()))?;
        let rank = c.u32()? as usize;
        let shape = (0..rank).map(|_| c.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let raw = c.take(numel.checked_mul(8).ok_or_else(|| Error::Codec("tensor too large".into()))?)?;
        let data = raw.chunks_exact(8).map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes"))).collect();
        params.insert(name, Tensor::new(shape, data)?);
    }
    if c.pos != bytes.len() {
        return Err(Error::Codec(format!("{} trailing bytes in checkpoint", bytes.len() - c.pos)));
    }
    RegressionModel::from_parts(header.config, params)
}
