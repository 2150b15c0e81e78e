//! Checkpoint archive: magic `GSNC`, a JSON manifest, then named tensors.
//!
//! ```text
//! "GSNC" | u32 manifest_len | manifest (UTF-8 JSON) | u32 entry_count |
//! entry*: u32 name_len | name | u8 width (4 or 8) | u32 rank | u32 dims[rank] | data
//! ```
//! All integers and floats are little-endian. Tensors are written as 64-bit
//! floats; 32-bit entries are accepted on read.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::config::ModelConfig;
use super::network::Model;
use super::params::Params;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"GSNC";
const ADAM_M: &str = "adam.m/";
const ADAM_V: &str = "adam.v/";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Stage {
    One,
    Two,
}

impl From<Stage> for u8 {
    fn from(s: Stage) -> u8 {
        match s {
            Stage::One => 1,
            Stage::Two => 2,
        }
    }
}

impl TryFrom<u8> for Stage {
    type Error = String;
    fn try_from(v: u8) -> std::result::Result<Self, String> {
        match v {
            1 => Ok(Stage::One),
            2 => Ok(Stage::Two),
            _ => Err(format!("unknown stage {v}")),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Params,
    pub v: Params,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub version: u32,
    pub stage: Stage,
    pub model: Model,
    pub optimizer: Option<OptimizerState>,
    pub seed: u64,
    pub iteration: u64,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    stage: Stage,
    config: ModelConfig,
    seed: u64,
    iteration: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    optimizer_step: Option<u64>,
}

impl Checkpoint {
    pub fn new(stage: Stage, model: Model, seed: u64, iteration: u64) -> Self {
        Self {
            version: CHECKPOINT_VERSION,
            stage,
            model,
            optimizer: None,
            seed,
            iteration,
        }
    }

    /// Parameter names and shapes must be exactly those the configuration
    /// and stage imply.
    pub fn validate(&self) -> Result<()> {
        let cfg = &self.model.config;
        cfg.validate()?;
        let mut expected = Params::init_backbone(cfg, 0);
        if self.stage == Stage::Two {
            expected.merge(Params::init_feature_head(cfg, 0));
        }
        let actual = &self.model.params;
        if actual.len() != expected.len() {
            return Err(Error::config(format!(
                "stage {} checkpoint should hold {} tensors, found {}",
                u8::from(self.stage),
                expected.len(),
                actual.len()
            )));
        }
        for (name, t) in expected.iter() {
            match actual.get(name) {
                None => return Err(Error::config(format!("missing parameter {name}"))),
                Some(a) if a.shape() != t.shape() => {
                    return Err(Error::config(format!(
                        "parameter {name} has shape {:?}, expected {:?}",
                        a.shape(),
                        t.shape()
                    )))
                }
                _ => {}
            }
        }
        Ok(())
    }
}

fn put_u32(out: &mut Vec<u8>, v: u32) {
    out.extend_from_slice(&v.to_le_bytes());
}

fn put_tensor(out: &mut Vec<u8>, name: &str, t: &Tensor) {
    put_u32(out, name.len() as u32);
    out.extend_from_slice(name.as_bytes());
    out.push(8);
    put_u32(out, t.shape().len() as u32);
    for d in t.shape() {
        put_u32(out, *d as u32);
    }
    for v in t.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Vec<u8> {
    let manifest = Manifest {
        format_version: ck.version,
        stage: ck.stage,
        config: ck.model.config.clone(),
        seed: ck.seed,
        iteration: ck.iteration,
        optimizer_step: ck.optimizer.as_ref().map(|o| o.step),
    };
    let json = serde_json::to_vec(&manifest).expect("manifest serializes");
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    put_u32(&mut out, json.len() as u32);
    out.extend_from_slice(&json);
    let opt_count = ck.optimizer.as_ref().map_or(0, |o| o.m.len() + o.v.len());
    put_u32(&mut out, (ck.model.params.len() + opt_count) as u32);
    for (name, t) in ck.model.params.iter() {
        put_tensor(&mut out, name, t);
    }
    if let Some(o) = &ck.optimizer {
        for (name, t) in o.m.iter() {
            put_tensor(&mut out, &format!("{ADAM_M}{name}"), t);
        }
        for (name, t) in o.v.iter() {
            put_tensor(&mut out, &format!("{ADAM_V}{name}"), t);
        }
    }
    out
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::format(self.path, "checkpoint is truncated"));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

pub fn decode_checkpoint(bytes: &[u8], path: &Path) -> Result<Checkpoint> {
    let mut r = Reader {
        bytes,
        pos: 0,
        path,
    };
    if r.take(4)? != MAGIC {
        return Err(Error::format(path, "bad magic, not a checkpoint"));
    }
    let len = r.u32()? as usize;
    let manifest: Manifest = serde_json::from_slice(r.take(len)?)
        .map_err(|e| Error::format(path, format!("manifest: {e}")))?;
    if manifest.format_version != CHECKPOINT_VERSION {
        return Err(Error::format(
            path,
            format!("unsupported checkpoint version {}", manifest.format_version),
        ));
    }
    let count = r.u32()? as usize;
    let mut params = Params::default();
    let mut m = Params::default();
    let mut v = Params::default();
    for _ in 0..count {
        let nlen = r.u32()? as usize;
        let name = String::from_utf8(r.take(nlen)?.to_vec())
            .map_err(|_| Error::format(path, "tensor name is not UTF-8"))?;
        let width = r.take(1)?[0];
        let rank = r.u32()? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32()? as usize);
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = match width {
            8 => r
                .take(n * 8)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
            4 => r
                .take(n * 4)?
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                .collect(),
            _ => {
                return Err(Error::format(
                    path,
                    format!("tensor {name} has unknown width {width}"),
                ))
            }
        };
        let t = Tensor::new(shape, data);
        if let Some(rest) = name.strip_prefix(ADAM_M) {
            m.insert(rest, t);
        } else if let Some(rest) = name.strip_prefix(ADAM_V) {
            v.insert(rest, t);
        } else {
            params.insert(name, t);
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::format(path, "trailing bytes after the last tensor"));
    }
    let optimizer = manifest
        .optimizer_step
        .map(|step| OptimizerState { step, m, v });
    let ck = Checkpoint {
        version: manifest.format_version,
        stage: manifest.stage,
        model: Model {
            config: manifest.config,
            params,
        },
        optimizer,
        seed: manifest.seed,
        iteration: manifest.iteration,
    };
    ck.validate()
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(ck)
}

pub fn write_checkpoint(ck: &Checkpoint, path: &Path) -> Result<()> {
    fs::write(path, encode_checkpoint(ck)).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes, path)
}
