//! Binary signature cache.
//!
//! Little-endian layout:
//!
//! ```text
//! magic   [u8; 4]  = "MSSG"
//! version u32      = 1
//! n       u32
//! s       u32
//! h       u32
//! g       u32
//! scales  [u32; s]
//! count   u64
//! count x { anchor u64, data [f64; n*n*s] row-major (i, j, c) }
//! ```
//!
//! Records are the individual tensors at every step a sequence needs; a
//! sequence for anchor `t` is reassembled from the records at
//! `t - (h-1) g, ..., t`.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use super::SignatureBank;
use crate::autodiff::Array;
use crate::error::{Error, Result};
use crate::io::{read_bytes, write_atomic};

pub const CACHE_MAGIC: [u8; 4] = *b"MSSG";
pub const CACHE_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CacheHeader {
    pub n: usize,
    pub scales: Vec<usize>,
    pub h: usize,
    pub g: usize,
}

pub fn write_cache(path: &Path, bank: &SignatureBank) -> Result<()> {
    let s = bank.scales().len();
    let n = bank.steps().next().map_or(0, |(_, a)| a.shape()[0]);
    let count = bank.steps().count();
    let mut out = Vec::with_capacity(32 + count * (8 + n * n * s * 8));
    out.extend_from_slice(&CACHE_MAGIC);
    for v in [
        CACHE_VERSION,
        n as u32,
        s as u32,
        bank.history() as u32,
        bank.gap() as u32,
    ] {
        out.extend_from_slice(&v.to_le_bytes());
    }
    for &w in bank.scales() {
        out.extend_from_slice(&(w as u32).to_le_bytes());
    }
    out.extend_from_slice(&(count as u64).to_le_bytes());
    for (t, a) in bank.steps() {
        out.extend_from_slice(&(t as u64).to_le_bytes());
        for v in a.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    write_atomic(path, &out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, k: usize) -> Result<&'a [u8]> {
        let end = self.pos + k;
        if end > self.buf.len() {
            return Err(Error::Format(format!(
                "cache truncated at byte {}",
                self.pos
            )));
        }
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

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn read_cache(path: &Path) -> Result<(CacheHeader, SignatureBank)> {
    let bytes = read_bytes(path)?;
    let mut r = Reader {
        buf: &bytes,
        pos: 0,
    };
    if r.take(4)? != CACHE_MAGIC {
        return Err(Error::Format(format!(
            "{} is not a signature cache",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != CACHE_VERSION {
        return Err(Error::Format(format!(
            "unsupported cache version {version}"
        )));
    }
    let n = r.u32()? as usize;
    let s = r.u32()? as usize;
    let h = r.u32()? as usize;
    let g = r.u32()? as usize;
    let scales = (0..s)
        .map(|_| r.u32().map(|w| w as usize))
        .collect::<Result<Vec<_>>>()?;
    let count = r.u64()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let t = r.u64()? as usize;
        let data = (0..n * n * s)
            .map(|_| r.f64())
            .collect::<Result<Vec<_>>>()?;
        tensors.insert(t, Arc::new(Array::from_vec(vec![n, n, s], data)?));
    }
    if r.pos != bytes.len() {
        return Err(Error::Format("trailing bytes after cache records".into()));
    }
    let header = CacheHeader {
        n,
        scales: scales.clone(),
        h,
        g,
    };
    Ok((header, SignatureBank::from_tensors(scales, h, g, tensors)))
}
