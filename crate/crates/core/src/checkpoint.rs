//! Versioned binary checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic   b"TAPSEGCK"
//! u32     format version
//! u32     config length, then the model config as TOML
//! u32     tensor count, then per tensor in name order:
//!         u32 name length, name, u8 kind (0 parameter, 1 buffer),
//!         u32 rank, u64 dims..., f32 values
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::model::{build_model, ModelConfig, SegModel};
use crate::nn::Module;

pub const MAGIC: &[u8; 8] = b"TAPSEGCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Kind {
    Parameter = 0,
    Buffer = 1,
}

pub fn to_bytes(model: &SegModel<f32>) -> Result<Vec<u8>> {
    let config = toml::to_string(&model.config).map_err(|e| Error::Checkpoint(e.to_string()))?;
    let mut entries: BTreeMap<String, (Kind, Vec<usize>, Vec<f32>)> = BTreeMap::new();
    for p in model.parameters() {
        entries.insert(p.name().to_string(), (Kind::Parameter, p.shape().to_vec(), p.tensor().to_vec()));
    }
    for b in model.buffers() {
        entries.insert(b.name().to_string(), (Kind::Buffer, b.shape().to_vec(), b.get()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(config.len() as u32).to_le_bytes());
    out.extend_from_slice(config.as_bytes());
    out.extend_from_slice(&(entries.len() as u32).to_le_bytes());
    for (name, (kind, dims, values)) in &entries {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(*kind as u8);
        out.extend_from_slice(&(dims.len() as u32).to_le_bytes());
        for &d in dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated file: needed {n} bytes at offset {}", self.pos))
        })?;
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

/// Decodes the config and raw tensors without building a model.
fn parse(bytes: &[u8]) -> Result<(ModelConfig, BTreeMap<String, (Kind, Vec<usize>, Vec<f32>)>)> {
    let mut r = Reader { buf: bytes, pos: 0 };
    if r.take(8).ok() != Some(MAGIC.as_slice()) {
        return Err(Error::Checkpoint("not a checkpoint file (bad magic)".into()));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!(
            "unsupported checkpoint version {version} (this build reads {VERSION})"
        )));
    }
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?)
        .map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
    let config: ModelConfig =
        toml::from_str(text).map_err(|e| Error::Checkpoint(format!("bad embedded config: {e}")))?;
    let count = r.u32()? as usize;
    let mut tensors = BTreeMap::new();
    for _ in 0..count {
        let n = r.u32()? as usize;
        let name = String::from_utf8(r.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
        let kind = match r.take(1)?[0] {
            0 => Kind::Parameter,
            1 => Kind::Buffer,
            k => return Err(Error::Checkpoint(format!("unknown tensor kind {k} for `{name}`"))),
        };
        let rank = r.u32()? as usize;
        let dims = (0..rank).map(|_| r.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        let numel: usize = dims.iter().product();
        let raw = r.take(numel.checked_mul(4).ok_or_else(|| Error::Checkpoint("tensor too large".into()))?)?;
        let values = raw.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect();
        tensors.insert(name, (kind, dims, values));
    }
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok((config, tensors))
}

/// Reads only the embedded model config.
pub fn read_config(bytes: &[u8]) -> Result<ModelConfig> {
    parse(bytes).map(|(c, _)| c)
}

pub fn from_bytes(bytes: &[u8]) -> Result<SegModel<f32>> {
    let (config, tensors) = parse(bytes)?;
    let mut model = build_model::<f32>(&config, 0)?;
    restore(&mut model, tensors)?;
    Ok(model)
}

fn restore(
    model: &mut SegModel<f32>,
    mut tensors: BTreeMap<String, (Kind, Vec<usize>, Vec<f32>)>,
) -> Result<()> {
    let mut take = |name: &str, kind: Kind, shape: &[usize]| -> Result<Vec<f32>> {
        let (k, dims, values) = tensors
            .remove(name)
            .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{name}`")))?;
        if k != kind || dims != shape {
            return Err(Error::Checkpoint(format!(
                "tensor `{name}` is {k:?} {dims:?}, expected {kind:?} {shape:?}"
            )));
        }
        Ok(values)
    };
    for p in model.parameters_mut() {
        let values = take(p.name(), Kind::Parameter, &p.shape().to_vec())?;
        p.assign(values)?;
    }
    for b in model.buffers() {
        b.set(take(b.name(), Kind::Buffer, b.shape())?)?;
    }
    if let Some(extra) = tensors.keys().next() {
        return Err(Error::Checkpoint(format!("unexpected tensor `{extra}`")));
    }
    Ok(())
}

pub fn save_checkpoint(model: &SegModel<f32>, path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = to_bytes(model)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, &bytes).map_err(|e| Error::io(path, e))?;
    Ok(model_id(&bytes))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<SegModel<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}

/// Loads a checkpoint and checks that it was written for `expected`.
pub fn load_checkpoint_as(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<SegModel<f32>> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    let (config, tensors) = parse(&bytes)?;
    if &config != expected {
        return Err(Error::ConfigMismatch(format!(
            "checkpoint holds a {} {:?} model, expected {} {:?}",
            config.variant, config.scale, expected.variant, expected.scale
        )));
    }
    let mut model = build_model::<f32>(&config, 0)?;
    restore(&mut model, tensors)?;
    Ok(model)
}

/// Hex SHA-256 of the checkpoint bytes.
pub fn model_id(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}
