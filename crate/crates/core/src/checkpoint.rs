//! Binary checkpoint format.
//!
//! Little-endian throughout:
//!
//! ```text
//! "CXK1"                      magic
//! u32                         format version (1)
//! u32 + bytes                 config JSON (UTF-8)
//! u32                         tensor count
//! per tensor:
//!   u32 + bytes               name (UTF-8)
//!   u32                       rank
//!   u64 * rank                dims
//!   f32 * prod(dims)          row-major payload
//! ```

use std::fs;
use std::io::Write;
use std::path::Path;

use crate::error::{CheckpointError, Error, Result};
use crate::model::{CnnModel, ModelConfig};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 4] = b"CXK1";
pub const FORMAT_VERSION: u32 = 1;

pub fn encode(model: &CnnModel) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    let config = serde_json::to_vec(model.config())
        .map_err(|e| CheckpointError::Config(e.to_string()))?;
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(&config);
    out.extend_from_slice(&(model.parameters().len() as u32).to_le_bytes());
    for (name, t) in model.parameters() {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8], CheckpointError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| CheckpointError::Truncated(what.to_string()))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32, CheckpointError> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64, CheckpointError> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(bytes: &[u8]) -> Result<CnnModel> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if &magic != MAGIC {
        return Err(CheckpointError::BadMagic(magic).into());
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(CheckpointError::VersionMismatch {
            expected: FORMAT_VERSION,
            found: version,
        }
        .into());
    }
    let len = r.u32("config length")? as usize;
    let config: ModelConfig = serde_json::from_slice(r.take(len, "config")?)
        .map_err(|e| CheckpointError::Config(e.to_string()))?;
    let expected = config
        .parameter_shapes()
        .map_err(|e| CheckpointError::Config(e.to_string()))?;
    let count = r.u32("tensor count")? as usize;
    if count != expected.len() {
        return Err(CheckpointError::ShapeMismatch {
            name: "<tensor count>".into(),
            expected: vec![expected.len()],
            found: vec![count],
        }
        .into());
    }
    let mut params = Vec::with_capacity(count);
    for (exp_name, exp_shape) in expected {
        let name_len = r.u32("tensor name length")? as usize;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|e| CheckpointError::Name(e.to_string()))?
            .to_string();
        if name != exp_name {
            return Err(CheckpointError::Name(format!("expected {exp_name}, found {name}")).into());
        }
        let rank = r.u32(&format!("{name} rank"))? as usize;
        let mut shape = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            shape.push(r.u64(&format!("{name} dims"))? as usize);
        }
        if shape != exp_shape {
            return Err(CheckpointError::ShapeMismatch {
                name,
                expected: exp_shape,
                found: shape,
            }
            .into());
        }
        let n: usize = shape.iter().product();
        let payload = r.take(n * 4, &format!("{name} payload"))?;
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
            .collect();
        params.push((name, Tensor::new(shape, data)?));
    }
    CnnModel::from_parameters(config, params)
}

/// Writes via a temporary sibling file and a rename.
pub fn save_checkpoint(model: &CnnModel, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(model)?;
    let tmp = path.with_extension("tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<CnnModel> {
    let bytes = fs::read(path.as_ref()).map_err(Error::Io)?;
    decode(&bytes)
}
