//! Binary checkpoint format.
//!
//! ```text
//! magic    8 bytes  "PTRNCKPT"
//! version  u32 LE
//! cfg_len  u32 LE, followed by the model config as TOML (UTF-8)
//! n_values u64 LE, followed by n_values f64 LE
//! n_segs   u32 LE, then per segment: name_len u32, name bytes, start u64, len u64
//! ```

use std::path::Path;

use super::{ModelConfig, ParamVector, Segment, Transformer};
use crate::{Error, Result, Scalar};

const MAGIC: &[u8; 8] = b"PTRNCKPT";
const VERSION: u32 = 1;

pub fn write_checkpoint<T: Scalar>(config: &ModelConfig, params: &ParamVector<T>) -> Result<Vec<u8>> {
    let cfg = toml::to_string(config).map_err(|e| Error::format("checkpoint config", e.to_string()))?;
    let mut out = Vec::with_capacity(32 + cfg.len() + params.len() * 8);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    out.extend_from_slice(cfg.as_bytes());
    out.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for v in &params.values {
        out.extend_from_slice(&v.f64().to_le_bytes());
    }
    out.extend_from_slice(&(params.segments().len() as u32).to_le_bytes());
    for seg in params.segments() {
        out.extend_from_slice(&(seg.name.len() as u32).to_le_bytes());
        out.extend_from_slice(seg.name.as_bytes());
        out.extend_from_slice(&(seg.start as u64).to_le_bytes());
        out.extend_from_slice(&(seg.len as u64).to_le_bytes());
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::format("checkpoint", "unexpected end of file"))?;
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
}

pub fn read_checkpoint<T: Scalar>(bytes: &[u8]) -> Result<(ModelConfig, ParamVector<T>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8)? != MAGIC {
        return Err(Error::format("checkpoint", "bad magic"));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::format("checkpoint", format!("unsupported version {version}")));
    }
    let cfg_len = r.u32()? as usize;
    let cfg_text = std::str::from_utf8(r.take(cfg_len)?)
        .map_err(|e| Error::format("checkpoint config", e.to_string()))?;
    let config: ModelConfig =
        toml::from_str(cfg_text).map_err(|e| Error::format("checkpoint config", e.to_string()))?;
    let n = r.u64()? as usize;
    let raw = r.take(n.checked_mul(8).ok_or_else(|| Error::format("checkpoint", "size overflow"))?)?;
    let values: Vec<T> = raw
        .chunks_exact(8)
        .map(|c| T::of(f64::from_le_bytes(c.try_into().unwrap())))
        .collect();
    let n_segs = r.u32()? as usize;
    let mut segments = Vec::with_capacity(n_segs);
    for _ in 0..n_segs {
        let len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|e| Error::format("checkpoint segment", e.to_string()))?
            .to_string();
        let start = r.u64()? as usize;
        let len = r.u64()? as usize;
        segments.push(Segment { name, start, len });
    }
    if r.pos != bytes.len() {
        return Err(Error::format("checkpoint", "trailing bytes"));
    }
    let params = ParamVector::from_parts(values, segments)?;
    Transformer::new(config.clone())?.check_params(&params)?;
    Ok((config, params))
}

pub fn save_checkpoint<T: Scalar>(
    path: impl AsRef<Path>,
    config: &ModelConfig,
    params: &ParamVector<T>,
) -> Result<()> {
    let path = path.as_ref();
    let bytes = write_checkpoint(config, params)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint<T: Scalar>(path: impl AsRef<Path>) -> Result<(ModelConfig, ParamVector<T>)> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    read_checkpoint(&bytes)
}
