//! Binary checkpoints.
//!
//! Little-endian layout:
//!
//! ```text
//! magic      8 bytes  "S2DCKPT\0"
//! version    u32
//! epoch      u64      completed epochs
//! seed       u64
//! json_len   u32
//! json       training config and epoch log
//! count      u32      number of tensors
//! directory  count × { name_len u16, name, kind u8, dtype u8, dims 4 × u32 }
//! payload    tensors in directory order, f64 values
//! ```
//!
//! Tensor kinds: 0 parameter, 1 batch-norm running mean, 2 batch-norm
//! running variance, 3 momentum buffer. The only dtype is 0 (`f64`).

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::layers::RunningStats;
use crate::model::Model;
use crate::tensor::{Shape, Tensor};
use crate::trainer::{EpochLog, TrainConfig};

pub const MAGIC: &[u8; 8] = b"S2DCKPT\0";
pub const VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
#[repr(u8)]
pub enum TensorKind {
    Param = 0,
    RunningMean = 1,
    RunningVar = 2,
    Velocity = 3,
}

impl TensorKind {
    fn from_u8(v: u8) -> Result<Self> {
        Ok(match v {
            0 => TensorKind::Param,
            1 => TensorKind::RunningMean,
            2 => TensorKind::RunningVar,
            3 => TensorKind::Velocity,
            other => return Err(Error::Parse(format!("unknown tensor kind {other}"))),
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub kind: TensorKind,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub config: TrainConfig,
    /// Completed epochs.
    pub epoch: u64,
    pub history: Vec<EpochLog>,
    pub tensors: Vec<NamedTensor>,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    config: TrainConfig,
    history: Vec<EpochLog>,
}

fn channel_tensor(v: &[f64]) -> Tensor {
    Tensor::from_vec([1, v.len(), 1, 1], v.to_vec()).expect("sized")
}

impl Checkpoint {
    /// Snapshot of a training run. `velocity` may be empty before the first step.
    pub fn capture(config: &TrainConfig, model: &Model, velocity: &[Tensor], epoch: u64, history: &[EpochLog]) -> Self {
        let mut tensors = Vec::new();
        for p in model.params() {
            tensors.push(NamedTensor {
                name: p.name.clone(),
                kind: TensorKind::Param,
                value: p.value.clone(),
            });
        }
        for n in model.norm_stats() {
            tensors.push(NamedTensor {
                name: n.name.clone(),
                kind: TensorKind::RunningMean,
                value: channel_tensor(&n.stats.mean),
            });
            tensors.push(NamedTensor {
                name: n.name.clone(),
                kind: TensorKind::RunningVar,
                value: channel_tensor(&n.stats.var),
            });
        }
        for (p, v) in model.params().iter().zip(velocity) {
            tensors.push(NamedTensor {
                name: p.name.clone(),
                kind: TensorKind::Velocity,
                value: v.clone(),
            });
        }
        Checkpoint {
            config: config.clone(),
            epoch,
            history: history.to_vec(),
            tensors,
        }
    }

    /// A checkpoint with no tensors (for non-trainable predictors).
    pub fn bare(config: TrainConfig) -> Self {
        Checkpoint {
            config,
            epoch: 0,
            history: Vec::new(),
            tensors: Vec::new(),
        }
    }

    fn find(&self, name: &str, kind: TensorKind) -> Option<&Tensor> {
        self.tensors
            .iter()
            .find(|t| t.kind == kind && t.name == name)
            .map(|t| &t.value)
    }

    /// Copies parameters and running statistics into `model`.
    pub fn restore_model(&self, model: &mut Model) -> Result<()> {
        let mut values = Vec::with_capacity(model.params().len());
        for p in model.params() {
            let v = self
                .find(&p.name, TensorKind::Param)
                .ok_or_else(|| Error::Parse(format!("checkpoint lacks parameter {}", p.name)))?;
            values.push(v.clone());
        }
        model.set_param_values(values)?;
        let names: Vec<String> = model.norm_stats().iter().map(|n| n.name.clone()).collect();
        for name in names {
            let (mean, var) = match (self.find(&name, TensorKind::RunningMean), self.find(&name, TensorKind::RunningVar)) {
                (Some(m), Some(v)) => (m.data().to_vec(), v.data().to_vec()),
                _ => return Err(Error::Parse(format!("checkpoint lacks running statistics for {name}"))),
            };
            let stats = model.norm_mut(&name).expect("name taken from the model");
            if stats.mean.len() != mean.len() || stats.var.len() != var.len() {
                return shape_err(format!("running statistics for {name} have the wrong channel count"));
            }
            *stats = RunningStats { mean, var };
        }
        Ok(())
    }

    /// Momentum buffers in parameter order; empty if none were saved.
    pub fn velocity_for(&self, model: &Model) -> Result<Vec<Tensor>> {
        if !self.tensors.iter().any(|t| t.kind == TensorKind::Velocity) {
            return Ok(Vec::new());
        }
        model
            .params()
            .iter()
            .map(|p| {
                let v = self
                    .find(&p.name, TensorKind::Velocity)
                    .ok_or_else(|| Error::Parse(format!("checkpoint lacks momentum for {}", p.name)))?;
                if v.shape() != p.value.shape() {
                    return shape_err(format!("momentum for {} is {}, expected {}", p.name, v.shape(), p.value.shape()));
                }
                Ok(v.clone())
            })
            .collect()
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&Meta {
            config: self.config.clone(),
            history: self.history.clone(),
        })
        .map_err(|e| Error::Parse(format!("config encoding: {e}")))?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.config.seed.to_le_bytes());
        out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.tensors.len() as u32).to_le_bytes());
        for t in &self.tensors {
            let name = t.name.as_bytes();
            let len = u16::try_from(name.len()).map_err(|_| Error::InvalidArgument(format!("tensor name too long: {}", t.name)))?;
            out.extend_from_slice(&len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(t.kind as u8);
            out.push(0);
            for d in t.value.shape().dims() {
                let d = u32::try_from(d).map_err(|_| Error::InvalidArgument(format!("tensor {} too large", t.name)))?;
                out.extend_from_slice(&d.to_le_bytes());
            }
        }
        for t in &self.tensors {
            for v in t.value.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if bytes.len() < MAGIC.len() || &bytes[..MAGIC.len()] != MAGIC {
            return Err(Error::BadMagic);
        }
        r.pos = MAGIC.len();
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let epoch = r.u64()?;
        let seed = r.u64()?;
        let meta_len = r.u32()? as usize;
        let meta: Meta = serde_json::from_slice(r.take(meta_len)?).map_err(|e| Error::Parse(format!("checkpoint config: {e}")))?;
        if meta.config.seed != seed {
            return Err(Error::Parse(format!("header seed {seed} disagrees with config seed {}", meta.config.seed)));
        }
        let count = r.u32()? as usize;
        let mut directory = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let name_len = r.u16()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec()).map_err(|_| Error::Parse("tensor name is not UTF-8".into()))?;
            let kind = TensorKind::from_u8(r.u8()?)?;
            let dtype = r.u8()?;
            if dtype != 0 {
                return Err(Error::Parse(format!("unsupported dtype {dtype} for tensor {name}")));
            }
            let mut dims = [0usize; 4];
            for d in &mut dims {
                *d = r.u32()? as usize;
            }
            directory.push((name, kind, Shape::from(dims)));
        }
        let expected = directory
            .iter()
            .try_fold(0usize, |acc, (_, _, s)| s.numel().checked_mul(8).and_then(|b| acc.checked_add(b)))
            .ok_or_else(|| Error::Parse("tensor directory overflows".into()))?;
        let found = bytes.len() - r.pos;
        if found != expected {
            return Err(Error::PayloadLength { expected, found });
        }
        let mut tensors = Vec::with_capacity(directory.len());
        for (name, kind, shape) in directory {
            let raw = r.take(shape.numel() * 8)?;
            let data = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            tensors.push(NamedTensor {
                name,
                kind,
                value: Tensor::from_vec(shape, data)?,
            });
        }
        Ok(Checkpoint {
            config: meta.config,
            epoch,
            history: meta.history,
            tensors,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Checkpoint::from_bytes(&fs::read(path)?)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let found = self.bytes.len() - self.pos;
        if found < n {
            return Err(Error::Truncated { expected: n, found });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}
