//! `CKP1` parameter files: magic, u32 count, then per parameter a u16 name
//! length, the UTF-8 name, u32 rank, u32 dims and f32 values, all little endian.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::params::param_layout;
use super::NetConfig;
use crate::tensor::{ParamSet, Tensor};
use crate::{Error, Result};

const MAGIC: &[u8; 4] = b"CKP1";

pub fn write_checkpoint<W: Write>(params: &ParamSet<f32>, mut w: W) -> Result<()> {
    let mut buf = Vec::with_capacity(16 + params.num_values() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params.iter() {
        let name = p.name.as_bytes();
        let len = u16::try_from(name.len()).map_err(|_| Error::Format(format!("parameter name too long: {}", p.name)))?;
        buf.extend_from_slice(&len.to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(p.value.shape().len() as u32).to_le_bytes());
        for &d in p.value.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn save_checkpoint(params: &ParamSet<f32>, path: impl AsRef<Path>) -> Result<()> {
    let mut bytes = Vec::new();
    write_checkpoint(params, &mut bytes)?;
    fs::write(path, bytes)?;
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::CorruptCheckpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parses a checkpoint without reference to any configuration.
pub fn read_checkpoint(bytes: &[u8]) -> Result<ParamSet<f32>> {
    let mut c = Cursor { bytes, pos: 0 };
    if c.take(4).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::CorruptCheckpoint("bad magic".into()));
    }
    let count = c.u32()?;
    let mut ps = ParamSet::new();
    for _ in 0..count {
        let len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| Error::CorruptCheckpoint("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = c.u32()? as usize;
        let mut shape = Vec::new();
        for _ in 0..rank {
            shape.push(c.u32()? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = n.filter(|_| rank > 0).ok_or_else(|| Error::CorruptCheckpoint(format!("bad shape for `{name}`")))?;
        let raw = c.take(n.checked_mul(4).ok_or_else(|| Error::CorruptCheckpoint("size overflow".into()))?)?;
        let data = raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        let t = Tensor::new(&shape, data).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
        ps.insert(name, t).map_err(|e| Error::CorruptCheckpoint(e.to_string()))?;
    }
    if c.pos != bytes.len() {
        return Err(Error::CorruptCheckpoint(format!("{} trailing bytes", bytes.len() - c.pos)));
    }
    Ok(ps)
}

/// Reads a checkpoint and checks names and shapes against `cfg`.
pub fn load_checkpoint(path: impl AsRef<Path>, cfg: &NetConfig) -> Result<ParamSet<f32>> {
    let ps = read_checkpoint(&fs::read(path)?)?;
    let layout = param_layout(cfg);
    if layout.len() != ps.len() {
        return Err(Error::shape(format!("checkpoint has {} parameters, config needs {}", ps.len(), layout.len())));
    }
    for spec in &layout {
        match ps.get(&spec.name) {
            None => return Err(Error::shape(format!("checkpoint lacks `{}`", spec.name))),
            Some(t) if t.shape() != spec.shape.as_slice() => {
                return Err(Error::shape(format!("`{}` is {:?}, config needs {:?}", spec.name, t.shape(), spec.shape)))
            }
            Some(_) => {}
        }
    }
    Ok(ps)
}
