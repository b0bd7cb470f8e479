//! Little-endian binary checkpoints.
//!
//! Layout: `b"CLEO"`, version `u32`, `d_in`, `hidden`, `classes` as `u32`,
//! then `w1`, `b1`, `w2`, `b2` as `f64`, then one length-prefixed (`u32`)
//! UTF-8 name per head column.

use std::path::Path;

use super::ModelParams;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CLEO";
const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    pub label_names: Vec<String>,
}

impl Checkpoint {
    pub fn to_bytes(&self) -> Vec<u8> {
        let p = &self.params;
        let mut out = Vec::with_capacity(24 + 8 * p.num_params());
        out.extend_from_slice(MAGIC);
        for v in [VERSION, p.d_in() as u32, p.hidden() as u32, p.classes() as u32] {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for v in p.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        for name in &self.label_names {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(Error::format("checkpoint", "bad magic"));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::format("checkpoint", format!("unsupported version {version}")));
        }
        let (d_in, hidden, classes) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
        let mut floats = |n: usize| -> Result<Vec<f64>> { (0..n).map(|_| r.f64()).collect() };
        let w1 = floats(d_in * hidden)?;
        let b1 = floats(hidden)?;
        let w2 = floats(hidden * classes)?;
        let b2 = floats(classes)?;
        let params = ModelParams::from_parts(d_in, hidden, classes, w1, b1, w2, b2)?;
        let label_names = (0..classes)
            .map(|_| {
                let len = r.u32()? as usize;
                String::from_utf8(r.take(len)?.to_vec())
                    .map_err(|e| Error::format("checkpoint", format!("class name: {e}")))
            })
            .collect::<Result<Vec<_>>>()?;
        if r.pos != bytes.len() {
            return Err(Error::format("checkpoint", "trailing bytes"));
        }
        Ok(Self { params, label_names })
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::format("checkpoint", "truncated"))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn write_checkpoint(path: &Path, ckpt: &Checkpoint) -> Result<()> {
    std::fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}
