//! Binary checkpoint container.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic      8 bytes  "DPMSCKPT"
//! version    u32
//! meta_len   u64, then meta_len bytes of JSON (model + training config)
//! iteration  u64
//! count      u64
//! count × tensor:
//!     name_len u32, name (UTF-8)
//!     ndim u32, ndim × u64 dims
//!     product(dims) × f64
//! ```
//!
//! Tensor names are prefixed by section: `student/`, `student_stats/`,
//! `teacher/`, `teacher_stats/`, `momentum/`. Running statistics are stored
//! as `<layer>.mean` and `<layer>.var`.

use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::ema::TeacherState;
use crate::error::{Error, Result};
use crate::model::{NormStats, ParamSet, SegNet, SegNetConfig};
use crate::trainer::{TrainConfig, TrainState};

pub const MAGIC: &[u8; 8] = b"DPMSCKPT";
pub const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CheckpointMeta {
    pub model: SegNetConfig,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NamedTensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub iteration: u64,
    pub tensors: Vec<NamedTensor>,
}

fn push_params(out: &mut Vec<NamedTensor>, prefix: &str, params: &ParamSet) {
    for p in params.iter() {
        out.push(NamedTensor { name: format!("{prefix}/{}", p.name), shape: p.shape.clone(), data: p.data.clone() });
    }
}

fn push_stats(out: &mut Vec<NamedTensor>, prefix: &str, stats: &NormStats) {
    for l in &stats.layers {
        for (suffix, v) in [("mean", &l.mean), ("var", &l.var)] {
            out.push(NamedTensor {
                name: format!("{prefix}/{}.{suffix}", l.name),
                shape: vec![v.len()],
                data: v.clone(),
            });
        }
    }
}

impl Checkpoint {
    pub fn from_state(meta: CheckpointMeta, state: &TrainState) -> Self {
        let mut tensors = Vec::new();
        push_params(&mut tensors, "student", &state.student);
        push_stats(&mut tensors, "student_stats", &state.student_stats);
        push_params(&mut tensors, "teacher", &state.teacher.params);
        push_stats(&mut tensors, "teacher_stats", &state.teacher.stats);
        push_params(&mut tensors, "momentum", &state.momentum);
        Self { meta, iteration: state.iteration, tensors }
    }

    /// Rebuilds the training state, checking every tensor against `net`.
    pub fn to_state(&self, net: &SegNet) -> Result<TrainState> {
        let mut by_name: HashMap<&str, &NamedTensor> = HashMap::with_capacity(self.tensors.len());
        for t in &self.tensors {
            if by_name.insert(&t.name, t).is_some() {
                return Err(Error::Checkpoint(format!("duplicate tensor `{}`", t.name)));
            }
        }
        let (template, stats_template) = net.init(0);
        let mut used = 0;
        let mut load_params = |prefix: &str| -> Result<ParamSet> {
            let mut out = template.clone();
            for p in out.iter_mut() {
                let key = format!("{prefix}/{}", p.name);
                let t =
                    by_name.get(key.as_str()).ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))?;
                if t.shape != p.shape {
                    return Err(Error::Checkpoint(format!("`{key}` has shape {:?}, expected {:?}", t.shape, p.shape)));
                }
                p.data.clone_from(&t.data);
                used += 1;
            }
            Ok(out)
        };
        let student = load_params("student")?;
        let teacher = load_params("teacher")?;
        let momentum = load_params("momentum")?;
        let mut load_stats = |prefix: &str| -> Result<NormStats> {
            let mut out = stats_template.clone();
            for l in &mut out.layers {
                for (suffix, v) in [("mean", &mut l.mean), ("var", &mut l.var)] {
                    let key = format!("{prefix}/{}.{suffix}", l.name);
                    let t = by_name
                        .get(key.as_str())
                        .ok_or_else(|| Error::Checkpoint(format!("missing tensor `{key}`")))?;
                    if t.shape != [v.len()] {
                        return Err(Error::Checkpoint(format!("`{key}` has shape {:?}", t.shape)));
                    }
                    v.clone_from(&t.data);
                    used += 1;
                }
            }
            Ok(out)
        };
        let student_stats = load_stats("student_stats")?;
        let teacher_stats = load_stats("teacher_stats")?;
        if used != self.tensors.len() {
            return Err(Error::Checkpoint(format!("{} unexpected tensors in checkpoint", self.tensors.len() - used)));
        }
        Ok(TrainState {
            iteration: self.iteration,
            student,
            student_stats,
            momentum,
            teacher: TeacherState { params: teacher, stats: teacher_stats },
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let meta = serde_json::to_vec(&self.meta).expect("checkpoint meta serializes");
        let payload: usize = self.tensors.iter().map(|t| 16 + t.name.len() + 8 * (t.shape.len() + t.data.len())).sum();
        let mut b = Vec::with_capacity(40 + meta.len() + payload);
        b.extend_from_slice(MAGIC);
        b.extend_from_slice(&VERSION.to_le_bytes());
        b.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        b.extend_from_slice(&meta);
        b.extend_from_slice(&self.iteration.to_le_bytes());
        b.extend_from_slice(&(self.tensors.len() as u64).to_le_bytes());
        for t in &self.tensors {
            b.extend_from_slice(&(t.name.len() as u32).to_le_bytes());
            b.extend_from_slice(t.name.as_bytes());
            b.extend_from_slice(&(t.shape.len() as u32).to_le_bytes());
            for &d in &t.shape {
                b.extend_from_slice(&(d as u64).to_le_bytes());
            }
            for &v in &t.data {
                b.extend_from_slice(&v.to_le_bytes());
            }
        }
        b
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let meta_len = r.len_u64()?;
        let meta: CheckpointMeta = serde_json::from_slice(r.take(meta_len)?)?;
        let iteration = r.u64()?;
        let count = r.len_u64()?;
        let mut tensors = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?
                .to_string();
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.len_u64()).collect::<Result<Vec<_>>>()?;
            let len = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .filter(|&n| n.checked_mul(8).is_some_and(|b| b <= r.remaining()))
                .ok_or_else(|| Error::Checkpoint(format!("tensor `{name}` overruns the file")))?;
            let raw = r.take(len * 8)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            tensors.push(NamedTensor { name, shape, data });
        }
        if r.remaining() != 0 {
            return Err(Error::Checkpoint(format!("{} trailing bytes", r.remaining())));
        }
        Ok(Self { meta, iteration, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Checkpoint("unexpected end of file".into()));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn len_u64(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Checkpoint("length overflows".into()))
    }
}
