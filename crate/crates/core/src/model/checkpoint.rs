//! `DRPM` checkpoint container.
//!
//! Layout (little-endian): magic `DRPM`, `u32` version, `u32` length plus the
//! model configuration as TOML, four `f64` normalization constants
//! (cx, cy, half width, pose scale), `u32` tensor count and the named
//! tensors, then a `u8` flag for the optional optimizer section (`u64` step,
//! `u32` completed epochs, and first/second moment tensors).
//!
//! A tensor is `u32` name length, name bytes, `u32` rank, `u64` per dimension
//! and the `f64` data.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::diffusion::InputNormalization;
use crate::error::{Error, Result};
use crate::model::{ModelConfig, ModelParams};
use crate::tensor::Tensor;
use crate::train::OptimizerState;

pub const MAGIC: &[u8; 4] = b"DRPM";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub norm: InputNormalization,
    pub params: ModelParams,
    pub optimizer: Option<OptimizerState>,
}

fn put_tensors(buf: &mut Vec<u8>, tensors: &BTreeMap<String, Tensor>) {
    buf.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    for (name, t) in tensors {
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name.as_bytes());
        buf.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            buf.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
}

fn params_map(p: &ModelParams) -> BTreeMap<String, Tensor> {
    p.iter().map(|(k, v)| (k.clone(), v.clone())).collect()
}

pub fn encode(ck: &Checkpoint) -> Result<Vec<u8>> {
    let cfg = toml::to_string(&ck.config).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let mut buf = Vec::new();
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(cfg.len() as u32).to_le_bytes());
    buf.extend_from_slice(cfg.as_bytes());
    for v in ck.norm.to_array() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    put_tensors(&mut buf, &params_map(&ck.params));
    match &ck.optimizer {
        None => buf.push(0),
        Some(opt) => {
            buf.push(1);
            buf.extend_from_slice(&opt.step.to_le_bytes());
            buf.extend_from_slice(&opt.epochs_done.to_le_bytes());
            let mut moments = BTreeMap::new();
            for (k, v) in opt.m.iter() {
                moments.insert(format!("m.{k}"), v.clone());
            }
            for (k, v) in opt.v.iter() {
                moments.insert(format!("v.{k}"), v.clone());
            }
            put_tensors(&mut buf, &moments);
        }
    }
    Ok(buf)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Checkpoint(format!("truncated at offset {} (needed {n} more bytes)", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
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

    fn tensors(&mut self) -> Result<BTreeMap<String, Tensor>> {
        let count = self.u32()?;
        let mut out = BTreeMap::new();
        for _ in 0..count {
            let len = self.u32()? as usize;
            let name = std::str::from_utf8(self.take(len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let rank = self.u32()? as usize;
            let shape = (0..rank).map(|_| self.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
            let numel = numel
                .filter(|n| n.checked_mul(8).is_some_and(|b| b <= self.buf.len() - self.pos))
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` shape {shape:?} exceeds file size")))?;
            let data = (0..numel).map(|_| self.f64()).collect::<Result<Vec<_>>>()?;
            let t = Tensor::new(shape, data).map_err(|e| Error::Checkpoint(format!("tensor `{name}`: {e}")))?;
            if out.insert(name.clone(), t).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor `{name}`")));
            }
        }
        Ok(out)
    }
}

/// Decodes a checkpoint and validates every tensor against the stored config.
pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Reader { buf: bytes, pos: 0 };
    let magic = r.take(4)?;
    if magic != MAGIC {
        return Err(Error::Checkpoint(format!("bad magic bytes {magic:?}, expected {MAGIC:?}")));
    }
    let version = r.u32()?;
    if version != VERSION {
        return Err(Error::Checkpoint(format!("unsupported version {version}, expected {VERSION}")));
    }
    let len = r.u32()? as usize;
    let text = std::str::from_utf8(r.take(len)?).map_err(|_| Error::Checkpoint("config is not UTF-8".into()))?;
    let config: ModelConfig = toml::from_str(text).map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    config.validate().map_err(|e| Error::Checkpoint(format!("config: {e}")))?;
    let mut norm = [0.0; 4];
    for v in norm.iter_mut() {
        *v = r.f64()?;
    }
    let norm = InputNormalization::from_array(norm);
    let params = ModelParams::from_map(r.tensors()?);
    check_exact(&params, &config)?;

    let optimizer = match r.u8()? {
        0 => None,
        1 => {
            let step = r.u64()?;
            let epochs_done = r.u32()?;
            let mut m = BTreeMap::new();
            let mut v = BTreeMap::new();
            for (name, t) in r.tensors()? {
                match name.split_once('.') {
                    Some(("m", rest)) => m.insert(rest.to_string(), t),
                    Some(("v", rest)) => v.insert(rest.to_string(), t),
                    _ => return Err(Error::Checkpoint(format!("unexpected optimizer tensor `{name}`"))),
                };
            }
            let opt = OptimizerState { step, epochs_done, m: ModelParams::from_map(m), v: ModelParams::from_map(v) };
            opt.check_matches(&params).map_err(|e| Error::Checkpoint(format!("optimizer state: {e}")))?;
            Some(opt)
        }
        f => return Err(Error::Checkpoint(format!("invalid optimizer flag {f}"))),
    };
    if r.pos != bytes.len() {
        return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
    }
    Ok(Checkpoint { config, norm, params, optimizer })
}

/// Shapes must match the config and no extra tensors may be present.
fn check_exact(params: &ModelParams, config: &ModelConfig) -> Result<()> {
    params.validate(config)?;
    let expected = config.parameter_shapes();
    if let Some((name, _)) = params.iter().find(|(k, _)| !expected.contains_key(*k)) {
        return Err(Error::Checkpoint(format!("unexpected tensor `{name}`")));
    }
    Ok(())
}

pub fn save_checkpoint(path: impl AsRef<Path>, ck: &Checkpoint) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(ck)?;
    // Write then rename so an interrupted save never clobbers the last good file.
    let tmp = path.with_extension("drpm.tmp");
    fs::write(&tmp, bytes)?;
    fs::rename(&tmp, path)?;
    Ok(())
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?;
    decode(&bytes)
}

/// Loads a checkpoint that must fit `expected`; a mismatch names the first
/// tensor whose shape disagrees.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &ModelConfig) -> Result<Checkpoint> {
    let ck = load_checkpoint(path)?;
    check_exact(&ck.params, expected)?;
    if &ck.config != expected {
        return Err(Error::Checkpoint(format!(
            "checkpoint config differs from the requested one (checkpoint has {} joints, {} channels; requested {} joints, {} channels)",
            ck.config.num_joints, ck.config.channels, expected.num_joints, expected.channels
        )));
    }
    Ok(ck)
}
