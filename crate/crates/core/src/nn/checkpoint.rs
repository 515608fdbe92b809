//! `AQCP` parameter checkpoints.
//!
//! Layout (all integers little-endian): magic `AQCP`, `u32` version (1), `u32` entry
//! count, then per entry: `u16` name length, UTF-8 name, scope byte (0 backbone,
//! 1 head), `u8` rank, `rank` x `u32` extents, `f64` payload.

use std::io::{Read, Write};
use std::path::Path;

use crate::tensor::{numel, Tensor};
use crate::Scalar;

use super::params::{ParameterSet, Scope};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"AQCP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("not a checkpoint: bad magic {0:?}")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u32),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("invalid scope byte {0}")]
    BadScope(u8),
    #[error("entry name is not UTF-8")]
    BadName,
    #[error("duplicate entry '{0}'")]
    DuplicateEntry(String),
    #[error("entry '{0}' too large for the format")]
    TooLarge(String),
    #[error("trailing bytes after last entry")]
    TrailingBytes,
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
}

pub fn encode_checkpoint<S: Scalar>(params: &ParameterSet<S>) -> Result<Vec<u8>, CheckpointError> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for (name, p) in params.iter() {
        let bytes = name.as_bytes();
        let len = u16::try_from(bytes.len()).map_err(|_| CheckpointError::TooLarge(name.into()))?;
        let rank = u8::try_from(p.value.rank()).map_err(|_| CheckpointError::TooLarge(name.into()))?;
        out.extend_from_slice(&len.to_le_bytes());
        out.extend_from_slice(bytes);
        out.push(p.scope.to_byte());
        out.push(rank);
        for &d in p.value.shape() {
            let d = u32::try_from(d).map_err(|_| CheckpointError::TooLarge(name.into()))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.as_f64().to_le_bytes());
        }
    }
    Ok(out)
}

struct Cursor<'a> {
    buf: &'a [u8],
    at: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CheckpointError> {
        let end = self.at.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.buf.get(self.at..end).ok_or(CheckpointError::Truncated)?;
        self.at = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8, CheckpointError> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16, CheckpointError> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64(&mut self) -> Result<f64, CheckpointError> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint<S: Scalar>(bytes: &[u8]) -> Result<ParameterSet<S>, CheckpointError> {
    let mut c = Cursor { buf: bytes, at: 0 };
    let magic: [u8; 4] = c.take(4)?.try_into().unwrap();
    if &magic != CHECKPOINT_MAGIC {
        return Err(CheckpointError::BadMagic(magic));
    }
    let version = c.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(CheckpointError::UnsupportedVersion(version));
    }
    let count = c.u32()?;
    let mut params = ParameterSet::new();
    for _ in 0..count {
        let len = c.u16()? as usize;
        let name = std::str::from_utf8(c.take(len)?)
            .map_err(|_| CheckpointError::BadName)?
            .to_string();
        let scope_byte = c.u8()?;
        let scope = Scope::from_byte(scope_byte).ok_or(CheckpointError::BadScope(scope_byte))?;
        let rank = c.u8()? as usize;
        let shape = (0..rank)
            .map(|_| c.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>, _>>()?;
        let n = numel(&shape);
        if n.saturating_mul(8) > bytes.len() {
            return Err(CheckpointError::Truncated);
        }
        let data = (0..n).map(|_| c.f64().map(S::lit)).collect::<Result<Vec<_>, _>>()?;
        let value = Tensor::new(shape, data).expect("extent product matches payload");
        if !params.insert(name.clone(), scope, value) {
            return Err(CheckpointError::DuplicateEntry(name));
        }
    }
    if c.at != bytes.len() {
        return Err(CheckpointError::TrailingBytes);
    }
    Ok(params)
}

pub fn save_checkpoint<S: Scalar>(path: &Path, params: &ParameterSet<S>) -> Result<(), CheckpointError> {
    let bytes = encode_checkpoint(params)?;
    std::fs::File::create(path)?.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint<S: Scalar>(path: &Path) -> Result<ParameterSet<S>, CheckpointError> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)?.read_to_end(&mut bytes)?;
    decode_checkpoint(&bytes)
}
