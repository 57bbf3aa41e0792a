//! `MCKP` v1 checkpoints (little-endian).
//!
//! ```text
//! "MCKP" u8:version u32:count
//! count x tensor
//! u32:epoch f64:best_val
//! u64:rng_seed u64:rng_stream u128:rng_word_pos
//! u64:adam_step u32:count count x tensor (first moments)
//!               u32:count count x tensor (second moments)
//! u32:len len x u8 (model descriptor, JSON)
//!
//! tensor = u16:name_len name u8:rank rank x u32:dim prod(dims) x f32
//! ```

use std::collections::HashMap;
use std::path::Path;

use crate::datapipe::{write_atomic, DataError};
use crate::models::{ModelAssembly, ModelDescriptor, ModelError};
use crate::tensor::{Rng, RngState, Tensor};

use super::AdamState;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MCKP";
pub const CHECKPOINT_VERSION: u8 = 1;

#[derive(Debug, thiserror::Error)]
pub enum CheckpointError {
    #[error("bad magic {0:?}, expected \"MCKP\"")]
    BadMagic([u8; 4]),
    #[error("unsupported checkpoint version {0}")]
    Version(u8),
    #[error("truncated checkpoint: {needed} bytes needed at offset {offset}, {available} available")]
    Truncated { offset: usize, needed: usize, available: usize },
    #[error("corrupt checkpoint: {0}")]
    Corrupt(String),
    #[error("checkpoint tensor {0:?} has no counterpart in the model")]
    UnknownTensor(String),
    #[error("model tensor {0:?} is missing from the checkpoint")]
    MissingTensor(String),
    #[error("tensor {name:?}: checkpoint shape {stored:?}, model shape {model:?}")]
    TensorShape { name: String, stored: Vec<usize>, model: Vec<usize> },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Model(#[from] ModelError),
}

type Result<T, E = CheckpointError> = std::result::Result<T, E>;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

impl NamedArray {
    fn of(name: &str, t: &Tensor<f32>) -> Self {
        NamedArray {
            name: name.to_string(),
            shape: t.shape().to_vec(),
            data: t.to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Parameters followed by buffers.
    pub tensors: Vec<NamedArray>,
    pub epoch: u32,
    /// Target-task validation accuracy, percent.
    pub best_val: f64,
    pub rng: RngState,
    pub adam_step: u64,
    pub adam_m: Vec<NamedArray>,
    pub adam_v: Vec<NamedArray>,
    pub descriptor: ModelDescriptor,
}

fn model_tensors(model: &ModelAssembly<f32>) -> Vec<(String, Tensor<f32>)> {
    let mut all = model.named_parameters();
    all.extend(model.named_buffers());
    all
}

impl Checkpoint {
    pub fn capture(model: &ModelAssembly<f32>, epoch: u32, best_val: f64, rng: RngState, adam: &AdamState<f32>) -> Self {
        let params = model.named_parameters();
        let moments = |bufs: &[Vec<f32>]| {
            params
                .iter()
                .zip(bufs)
                .map(|((name, p), data)| NamedArray {
                    name: name.clone(),
                    shape: p.shape().to_vec(),
                    data: data.clone(),
                })
                .collect()
        };
        Checkpoint {
            tensors: model_tensors(model).iter().map(|(n, t)| NamedArray::of(n, t)).collect(),
            epoch,
            best_val,
            rng,
            adam_step: adam.step,
            adam_m: moments(&adam.m),
            adam_v: moments(&adam.v),
            descriptor: model.descriptor(),
        }
    }

    /// Copy stored values into `model`. Names and shapes must match exactly.
    pub fn load_into(&self, model: &ModelAssembly<f32>) -> Result<()> {
        let mut targets: HashMap<String, Tensor<f32>> = model_tensors(model).into_iter().collect();
        for arr in &self.tensors {
            if !targets.contains_key(&arr.name) {
                return Err(CheckpointError::UnknownTensor(arr.name.clone()));
            }
        }
        for (name, t) in model_tensors(model) {
            let arr = self
                .tensors
                .iter()
                .find(|a| a.name == name)
                .ok_or_else(|| CheckpointError::MissingTensor(name.clone()))?;
            if arr.shape != t.shape() {
                return Err(CheckpointError::TensorShape {
                    name,
                    stored: arr.shape.clone(),
                    model: t.shape().to_vec(),
                });
            }
        }
        for arr in &self.tensors {
            let t = targets.remove(&arr.name).expect("checked above");
            t.data_mut().copy_from_slice(&arr.data);
        }
        Ok(())
    }

    /// Rebuild the stored model.
    pub fn build_model(&self) -> Result<ModelAssembly<f32>> {
        // initial values are overwritten by the stored ones
        let model = ModelAssembly::from_descriptor(&self.descriptor, &mut Rng::new(0))?;
        self.load_into(&model)?;
        Ok(model)
    }

    pub fn adam_state(&self) -> AdamState<f32> {
        AdamState {
            step: self.adam_step,
            m: self.adam_m.iter().map(|a| a.data.clone()).collect(),
            v: self.adam_v.iter().map(|a| a.data.clone()).collect(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        write_arrays(&mut out, &self.tensors);
        out.extend_from_slice(&self.epoch.to_le_bytes());
        out.extend_from_slice(&self.best_val.to_le_bytes());
        out.extend_from_slice(&self.rng.seed.to_le_bytes());
        out.extend_from_slice(&self.rng.stream.to_le_bytes());
        out.extend_from_slice(&self.rng.word_pos.to_le_bytes());
        out.extend_from_slice(&self.adam_step.to_le_bytes());
        write_arrays(&mut out, &self.adam_m);
        write_arrays(&mut out, &self.adam_v);
        let json = serde_json::to_vec(&self.descriptor).expect("descriptor serializes");
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        let magic: [u8; 4] = r.take(4)?.try_into().expect("four bytes");
        if &magic != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic(magic));
        }
        let version = r.take(1)?[0];
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version));
        }
        let tensors = r.arrays()?;
        let epoch = r.u32()?;
        let best_val = f64::from_le_bytes(r.array()?);
        let rng = RngState {
            seed: r.u64()?,
            stream: r.u64()?,
            word_pos: u128::from_le_bytes(r.array()?),
        };
        let adam_step = r.u64()?;
        let adam_m = r.arrays()?;
        let adam_v = r.arrays()?;
        let len = r.u32()? as usize;
        let descriptor = serde_json::from_slice(r.take(len)?)
            .map_err(|e| CheckpointError::Corrupt(format!("model descriptor: {e}")))?;
        if r.pos != bytes.len() {
            return Err(CheckpointError::Corrupt(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint {
            tensors,
            epoch,
            best_val,
            rng,
            adam_step,
            adam_m,
            adam_v,
            descriptor,
        })
    }
}

fn write_arrays(out: &mut Vec<u8>, arrays: &[NamedArray]) {
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for a in arrays {
        out.extend_from_slice(&(a.name.len() as u16).to_le_bytes());
        out.extend_from_slice(a.name.as_bytes());
        out.push(a.shape.len() as u8);
        for &d in &a.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in &a.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let available = self.bytes.len() - self.pos;
        if n > available {
            return Err(CheckpointError::Truncated {
                offset: self.pos,
                needed: n,
                available,
            });
        }
        let out = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(out)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn arrays(&mut self) -> Result<Vec<NamedArray>> {
        let count = self.u32()? as usize;
        let mut out = Vec::new();
        for _ in 0..count {
            let len = u16::from_le_bytes(self.array()?) as usize;
            let name = std::str::from_utf8(self.take(len)?)
                .map_err(|e| CheckpointError::Corrupt(format!("tensor name: {e}")))?
                .to_string();
            let rank = self.take(1)?[0] as usize;
            let mut shape = Vec::with_capacity(rank);
            for _ in 0..rank {
                shape.push(self.u32()? as usize);
            }
            let n = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .and_then(|n| n.checked_mul(4))
                .ok_or_else(|| CheckpointError::Corrupt(format!("tensor {name:?} dims overflow")))?;
            let data = self.take(n)?.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("four bytes"))).collect();
            out.push(NamedArray { name, shape, data });
        }
        Ok(out)
    }
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_atomic(path, &ck.to_bytes()).map_err(|e| match e {
        DataError::Io { path, source } => CheckpointError::Io { path, source },
        other => CheckpointError::Corrupt(other.to_string()),
    })
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = std::fs::read(path).map_err(|source| CheckpointError::Io {
        path: path.display().to_string(),
        source,
    })?;
    Checkpoint::from_bytes(&bytes)
}
