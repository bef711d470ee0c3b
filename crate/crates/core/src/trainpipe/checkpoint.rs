//! Binary checkpoint: `"FSDT"`, `u32` LE version, `u64` LE header length,
//! UTF-8 JSON header, then little-endian `f32` tensors in header order.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{TrainConfig, TrainError};
use crate::model::ModelConfig;
use crate::ndgrad::Tensor;
use crate::synthworld::ClassSplit;

pub const MAGIC: &[u8; 4] = b"FSDT";
pub const VERSION: u32 = 1;

/// Counters that fully determine every random stream of the run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RngState {
    pub seed: u64,
    /// Supervised optimizer steps taken.
    pub step: u64,
    /// Pre-training optimizer steps taken.
    pub pretrain_step: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub classes: ClassSplit,
    /// Completed supervised epochs.
    pub epoch: usize,
    pub rng: RngState,
    pub params: Vec<(String, Tensor<f32>)>,
    /// Momentum (or Adam first-moment) buffers, aligned with `params`.
    pub velocity: Vec<Tensor<f32>>,
    /// Adam second-moment buffers, aligned with `params`.
    pub second_moment: Vec<Tensor<f32>>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Header {
    model: ModelConfig,
    train: TrainConfig,
    classes: ClassSplit,
    epoch: usize,
    rng: RngState,
    tensors: Vec<TensorEntry>,
}

const VELOCITY_PREFIX: &str = "optim.velocity/";
const SECOND_PREFIX: &str = "optim.second/";

impl Checkpoint {
    pub fn to_bytes(&self) -> Result<Vec<u8>, TrainError> {
        if self.velocity.len() != self.params.len() || self.second_moment.len() != self.params.len() {
            return Err(TrainError::Checkpoint("optimizer state and parameter lists differ in length".into()));
        }
        let mut tensors = Vec::new();
        let mut offset = 0;
        let all = self
            .params
            .iter()
            .map(|(n, t)| (n.clone(), t))
            .chain(self.params.iter().zip(&self.velocity).map(|((n, _), v)| (format!("{VELOCITY_PREFIX}{n}"), v)))
            .chain(self.params.iter().zip(&self.second_moment).map(|((n, _), v)| (format!("{SECOND_PREFIX}{n}"), v)));
        let mut blobs: Vec<&Tensor<f32>> = Vec::new();
        for (name, t) in all {
            tensors.push(TensorEntry {
                name,
                shape: t.shape().to_vec(),
                offset,
            });
            offset += t.len() * 4;
            blobs.push(t);
        }
        let header = Header {
            model: self.model.clone(),
            train: self.train.clone(),
            classes: self.classes.clone(),
            epoch: self.epoch,
            rng: self.rng,
            tensors,
        };
        let json = serde_json::to_vec(&header).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        let mut out = Vec::with_capacity(16 + json.len() + offset);
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        for t in blobs {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, TrainError> {
        let bad = |m: &str| TrainError::Checkpoint(m.to_string());
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(bad("not an FSDT checkpoint"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(TrainError::Checkpoint(format!("unsupported checkpoint version {version}")));
        }
        let hlen = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        let body_start = 16usize.checked_add(hlen).filter(|&e| e <= bytes.len()).ok_or_else(|| bad("truncated header"))?;
        let header: Header =
            serde_json::from_slice(&bytes[16..body_start]).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        let body = &bytes[body_start..];
        let mut params = Vec::new();
        let mut velocity = Vec::new();
        let mut second_moment = Vec::new();
        for e in header.tensors {
            let n: usize = e.shape.iter().product();
            let end = e.offset.checked_add(n * 4).filter(|&x| x <= body.len()).ok_or_else(|| bad("truncated tensor data"))?;
            let data = body[e.offset..end]
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
                .collect();
            let t = Tensor::new(&e.shape, data).map_err(|err| TrainError::Checkpoint(err.to_string()))?;
            if e.name.starts_with(VELOCITY_PREFIX) {
                velocity.push(t);
            } else if e.name.starts_with(SECOND_PREFIX) {
                second_moment.push(t);
            } else {
                params.push((e.name, t));
            }
        }
        if velocity.len() != params.len() || second_moment.len() != params.len() {
            return Err(bad("optimizer state and parameter lists differ in length"));
        }
        Ok(Self {
            model: header.model,
            train: header.train,
            classes: header.classes,
            epoch: header.epoch,
            rng: header.rng,
            params,
            velocity,
            second_moment,
        })
    }

    pub fn save(&self, path: &Path) -> Result<(), TrainError> {
        let bytes = self.to_bytes()?;
        // Write-then-rename keeps the previous file intact if the process dies mid-write.
        let tmp = path.with_extension("tmp");
        fs::write(&tmp, bytes).map_err(|e| TrainError::Io(format!("{}: {e}", tmp.display())))?;
        fs::rename(&tmp, path).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self, TrainError> {
        let bytes = fs::read(path).map_err(|e| TrainError::Io(format!("{}: {e}", path.display())))?;
        Self::from_bytes(&bytes).map_err(|e| match e {
            TrainError::Checkpoint(m) => TrainError::Checkpoint(format!("{}: {m}", path.display())),
            other => other,
        })
    }
}
