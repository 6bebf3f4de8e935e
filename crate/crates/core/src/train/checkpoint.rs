//! Binary checkpoint format, all integers little-endian:
//!
//! ```text
//! "CRKN" | u16 version | u16 len, family tag | u32 len, architecture description
//! u32 parameter count
//! per parameter: u16 len, name | u8 trainable | u8 ndim | ndim x u32 dims
//!                u32 value count | value count x f32
//! ```

use std::path::Path;

use thiserror::Error;

use crate::error::{Error, Result};
use crate::nn::{Architecture, Family, Model, ParamStore};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CRKN";
pub const VERSION: u16 = 1;
const MAX_NDIM: usize = 8;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {found} (this build reads {VERSION})")]
    UnsupportedVersion { found: u16 },
    #[error("truncated while reading {what} at byte {offset}")]
    Truncated { what: &'static str, offset: usize },
    #[error("checkpoint holds a {found} model, expected {expected}")]
    FamilyMismatch { expected: Family, found: Family },
    #[error("malformed checkpoint: {0}")]
    Malformed(String),
    #[error("{0} unexpected trailing bytes")]
    TrailingBytes(usize),
}

pub fn encode_checkpoint(model: &Model) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    let tag = model.family().tag().as_bytes();
    out.extend_from_slice(&(tag.len() as u16).to_le_bytes());
    out.extend_from_slice(tag);
    let desc = model.architecture().describe();
    out.extend_from_slice(&(desc.len() as u32).to_le_bytes());
    out.extend_from_slice(desc.as_bytes());
    out.extend_from_slice(&(model.params().len() as u32).to_le_bytes());
    for (name, t) in model.params().iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(t.requires_grad as u8);
        out.push(t.shape().len() as u8);
        for &d in t.shape() {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&(t.len() as u32).to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &'static str) -> Result<&'a [u8], CheckpointError> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let Some(end) = end else {
            return Err(CheckpointError::Truncated { what, offset: self.pos });
        };
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self, what: &'static str) -> Result<u8, CheckpointError> {
        Ok(self.take(1, what)?[0])
    }

    fn u16(&mut self, what: &'static str) -> Result<u16, CheckpointError> {
        let b = self.take(2, what)?;
        Ok(u16::from_le_bytes([b[0], b[1]]))
    }

    fn u32(&mut self, what: &'static str) -> Result<u32, CheckpointError> {
        let b = self.take(4, what)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }

    fn str(&mut self, len: usize, what: &'static str) -> Result<&'a str, CheckpointError> {
        std::str::from_utf8(self.take(len, what)?)
            .map_err(|_| CheckpointError::Malformed(format!("{what} is not UTF-8")))
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }
}

fn malformed(e: Error) -> Error {
    match e {
        Error::Checkpoint(_) => e,
        other => CheckpointError::Malformed(other.to_string()).into(),
    }
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4, "magic").map_err(|_| CheckpointError::BadMagic)? != MAGIC {
        return Err(CheckpointError::BadMagic.into());
    }
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(CheckpointError::UnsupportedVersion { found: version }.into());
    }
    let tag_len = r.u16("family tag length")? as usize;
    let family = Family::parse(r.str(tag_len, "family tag")?).map_err(malformed)?;
    let desc_len = r.u32("description length")? as usize;
    let arch = Architecture::from_description(r.str(desc_len, "architecture description")?).map_err(malformed)?;
    if arch.family() != family {
        return Err(CheckpointError::Malformed(format!(
            "family tag {family} disagrees with description {}",
            arch.family()
        ))
        .into());
    }
    let count = r.u32("parameter count")? as usize;
    let mut params = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u16("parameter name length")? as usize;
        let name = r.str(name_len, "parameter name")?;
        let trainable = match r.u8("trainable flag")? {
            0 => false,
            1 => true,
            b => return Err(CheckpointError::Malformed(format!("{name}: trainable flag {b}")).into()),
        };
        let ndim = r.u8("rank")? as usize;
        if ndim == 0 || ndim > MAX_NDIM {
            return Err(CheckpointError::Malformed(format!("{name}: rank {ndim}")).into());
        }
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(r.u32("dimension")? as usize);
        }
        let n = r.u32("value count")? as usize;
        let product = shape.iter().try_fold(1usize, |acc, &d| acc.checked_mul(d));
        if product != Some(n) || n == 0 {
            return Err(CheckpointError::Malformed(format!("{name}: {n} values for shape {shape:?}")).into());
        }
        if n.saturating_mul(4) > r.remaining() {
            return Err(CheckpointError::Truncated {
                what: "parameter values",
                offset: r.pos,
            }
            .into());
        }
        let data = r
            .take(n * 4, "parameter values")?
            .chunks_exact(4)
            .map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]]))
            .collect();
        let mut t = Tensor::new(shape, data).map_err(malformed)?;
        t.requires_grad = trainable;
        params.insert(name, t).map_err(malformed)?;
    }
    if r.remaining() != 0 {
        return Err(CheckpointError::TrailingBytes(r.remaining()).into());
    }
    Model::from_parts(arch, params).map_err(malformed)
}

pub fn save_checkpoint(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, encode_checkpoint(model)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}

/// [`load_checkpoint`] that also insists on the model family.
pub fn load_checkpoint_as(path: impl AsRef<Path>, expected: Family) -> Result<Model> {
    let model = load_checkpoint(path)?;
    if model.family() != expected {
        return Err(CheckpointError::FamilyMismatch {
            expected,
            found: model.family(),
        }
        .into());
    }
    Ok(model)
}
