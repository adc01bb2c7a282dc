//! Versioned binary container of named tensors.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  b"CMCK"
//! u32    format version (1)
//! u32    metadata length in bytes
//! [..]   metadata JSON (CheckpointMeta)
//! u32    tensor count
//! per tensor:
//!   u32  name length, then that many UTF-8 bytes
//!   u32  rows
//!   u32  cols
//!   rows*cols f64 values, little-endian bit patterns
//! ```
//!
//! Round-trips bit-exactly: values are written as raw IEEE-754 bits.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::encoder::EncoderShape;
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"CMCK";
const VERSION: u32 = 1;

/// Everything needed to rebuild a model around the tensors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub schema_version: u32,
    pub config_hash: String,
    pub encoder: EncoderShape,
    pub parts: usize,
    pub num_identities: usize,
    pub beta: f64,
    pub gem_p: f64,
    pub trainable_part_weights: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

pub fn save(path: &Path, meta: &CheckpointMeta, tensors: &[NamedTensor]) -> Result<()> {
    let meta_json = serde_json::to_vec(meta).expect("meta serializes");
    let mut out: Vec<u8> = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta_json);
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for t in tensors {
        if t.values.len() != t.rows * t.cols {
            return Err(Error::InvalidArgument(format!(
                "tensor '{}' has {} values for shape {}x{}",
                t.name,
                t.values.len(),
                t.rows,
                t.cols
            )));
        }
        let name = t.name.as_bytes();
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name);
        out.extend_from_slice(&(t.rows as u32).to_le_bytes());
        out.extend_from_slice(&(t.cols as u32).to_le_bytes());
        for v in &t.values {
            out.extend_from_slice(&v.to_bits().to_le_bytes());
        }
    }
    fs::write(path, out).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.bytes.len() {
            return Err(Error::Parse {
                line: 0,
                message: "checkpoint truncated".into(),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        let b = self.take(4)?;
        Ok(u32::from_le_bytes([b[0], b[1], b[2], b[3]]))
    }
}

pub fn load(path: &Path) -> Result<(CheckpointMeta, Vec<NamedTensor>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader { bytes: &bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::Parse { line: 0, message: "not a checkpoint file".into() });
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Parse {
            line: 0,
            message: format!("unsupported checkpoint version {}", version),
        });
    }
    let meta_len = r.u32()? as usize;
    let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)
        .map_err(|e| Error::Parse { line: 0, message: format!("bad metadata: {}", e) })?;
    let count = r.u32()? as usize;
    let mut tensors = Vec::with_capacity(count);
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = String::from_utf8(r.take(name_len)?.to_vec())
            .map_err(|_| Error::Parse { line: 0, message: "bad tensor name".into() })?;
        let rows = r.u32()? as usize;
        let cols = r.u32()? as usize;
        let mut values = Vec::with_capacity(rows * cols);
        for _ in 0..rows * cols {
            let b = r.take(8)?;
            values.push(f64::from_bits(u64::from_le_bytes([
                b[0], b[1], b[2], b[3], b[4], b[5], b[6], b[7],
            ])));
        }
        tensors.push(NamedTensor { name, rows, cols, values });
    }
    Ok((meta, tensors))
}
