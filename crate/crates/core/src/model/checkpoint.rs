//! Binary checkpoint, all integers and floats little-endian:
//!
//! ```text
//! magic    8 bytes  "KTCKPT\0\x01"
//! version  u32
//! config   u64 byte length, then UTF-8 JSON of ModelConfig
//! count    u32 number of tensors
//! per tensor:
//!   name   u32 byte length, then UTF-8
//!   ndim   u32, then ndim × u64 dims
//!   data   product(dims) × f64
//! ```

use std::path::Path;

use super::{KtModel, ModelConfig};
use crate::error::{KtError, Result};
use crate::numerics::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"KTCKPT\0\x01";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode(model: &KtModel) -> Result<Vec<u8>> {
    let cfg = serde_json::to_vec(&model.config)?;
    let mut buf = Vec::with_capacity(64 + cfg.len() + model.param_count() * 8);
    buf.extend_from_slice(CHECKPOINT_MAGIC);
    buf.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    buf.extend_from_slice(&(cfg.len() as u64).to_le_bytes());
    buf.extend_from_slice(&cfg);
    buf.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, t) in model.names().iter().zip(model.params()) {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len());
        let end = end.ok_or_else(|| KtError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len(&mut self, wide: bool) -> Result<usize> {
        let v = if wide { self.u64()? } else { u64::from(self.u32()?) };
        usize::try_from(v).map_err(|_| KtError::Checkpoint(format!("length {v} too large")))
    }
}

pub fn decode(buf: &[u8]) -> Result<KtModel> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8)? != CHECKPOINT_MAGIC {
        return Err(KtError::Checkpoint("bad magic".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(KtError::Checkpoint(format!("unsupported version {version}")));
    }
    let n = r.len(true)?;
    let config: ModelConfig = serde_json::from_slice(r.take(n)?)?;
    let count = r.u32()? as usize;
    let mut names = Vec::with_capacity(count);
    let mut params = Vec::with_capacity(count);
    for _ in 0..count {
        let n = r.len(false)?;
        let name = std::str::from_utf8(r.take(n)?)
            .map_err(|e| KtError::Checkpoint(format!("tensor name: {e}")))?
            .to_string();
        let ndim = r.len(false)?;
        let shape = (0..ndim).map(|_| r.len(true)).collect::<Result<Vec<_>>>()?;
        let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let numel = numel.ok_or_else(|| KtError::Checkpoint(format!("{name}: shape overflow")))?;
        let raw = r.take(
            numel
                .checked_mul(8)
                .ok_or_else(|| KtError::Checkpoint("size overflow".into()))?,
        )?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.push(Tensor::new(shape, data).map_err(|e| KtError::Checkpoint(format!("{name}: {e}")))?);
        names.push(name);
    }
    if r.pos != buf.len() {
        return Err(KtError::Checkpoint(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    KtModel::from_parts(config, names, params)
}

pub fn save_checkpoint(path: &Path, model: &KtModel) -> Result<()> {
    crate::io::write_atomic(path, &encode(model)?)
}

pub fn load_checkpoint(path: &Path) -> Result<KtModel> {
    let buf = std::fs::read(path).map_err(|e| KtError::io(path, e))?;
    decode(&buf)
}
