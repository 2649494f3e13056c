//! Binary checkpoint format, all integers and floats little-endian:
//!
//! ```text
//! magic "MSCR" | version u32 | config hash u64
//! config JSON length u64 | config JSON bytes
//! n u64 | mean f64 x n | std f64 x n
//! array count u64
//! per array: name length u32 | name | rank u32 | dims u64 x rank | values f64 x prod(dims)
//! ```

use std::path::Path;
use std::sync::Arc;

use super::config::ModelConfig;
use super::params::ModelParams;
use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::io::{read_bytes, write_atomic};
use crate::signature::Standardizer;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MSCR";
pub const CHECKPOINT_VERSION: u32 = 1;

pub fn encode_checkpoint(params: &ModelParams) -> Vec<u8> {
    let cfg = params.config();
    let json = serde_json::to_vec(cfg).expect("config serializes");
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&cfg.hash().to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let st = &params.standardizer;
    out.extend_from_slice(&(st.mean.len() as u64).to_le_bytes());
    for x in st.mean.iter().chain(&st.std) {
        out.extend_from_slice(&x.to_le_bytes());
    }
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for (name, v) in params.names().iter().zip(params.values()) {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(v.shape().len() as u32).to_le_bytes());
        for d in v.shape() {
            out.extend_from_slice(&(*d as u64).to_le_bytes());
        }
        for x in v.data() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, len: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(len).filter(|&e| e <= self.buf.len());
        let end =
            end.ok_or_else(|| Error::Format(format!("checkpoint truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        let v = self.u64()?;
        usize::try_from(v)
            .ok()
            .filter(|&v| v <= self.buf.len())
            .ok_or_else(|| Error::Format(format!("implausible length {v} in checkpoint")))
    }

    fn f64s(&mut self, count: usize) -> Result<Vec<f64>> {
        let bytes = self.take(
            count
                .checked_mul(8)
                .ok_or_else(|| Error::Format("length overflow".into()))?,
        )?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

/// Decode a checkpoint. With `expected`, the stored architecture must match it.
pub fn decode_checkpoint(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<ModelParams> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(4)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Incompatible(format!(
            "checkpoint version {version}, this build reads {CHECKPOINT_VERSION}"
        )));
    }
    let hash = r.u64()?;
    let json_len = r.len()?;
    let config: ModelConfig = serde_json::from_slice(r.take(json_len)?)
        .map_err(|e| Error::Format(format!("checkpoint config: {e}")))?;
    if config.hash() != hash {
        return Err(Error::Incompatible(
            "stored config hash does not match stored config".into(),
        ));
    }
    if let Some(want) = expected {
        if want.hash() != hash {
            return Err(Error::Incompatible(format!(
                "checkpoint was trained with n={}, scales={:?}, channels={:?}, h={}, mode={}; \
                 requested n={}, scales={:?}, channels={:?}, h={}, mode={}",
                config.n,
                config.scales,
                config.channels,
                config.h,
                config.mode.name(),
                want.n,
                want.scales,
                want.channels,
                want.h,
                want.mode.name()
            )));
        }
    }
    let n = r.len()?;
    let mean = r.f64s(n)?;
    let std = r.f64s(n)?;
    let count = r.len()?;
    let mut names = Vec::with_capacity(count);
    let mut values = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("parameter name is not UTF-8".into()))?
            .to_owned();
        let rank = r.u32()? as usize;
        let shape: Vec<usize> = (0..rank).map(|_| r.len()).collect::<Result<_>>()?;
        let data = r.f64s(shape.iter().product())?;
        names.push(name);
        values.push(Arc::new(Array::from_vec(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes in checkpoint",
            bytes.len() - r.pos
        )));
    }
    ModelParams::from_parts(config, names, values, Standardizer { mean, std })
}

pub fn save_checkpoint(path: &Path, params: &ModelParams) -> Result<()> {
    write_atomic(path, &encode_checkpoint(params))
}

pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<ModelParams> {
    decode_checkpoint(&read_bytes(path)?, expected)
}
