//! Checkpoint layout: `meta.json` naming every tensor (shape, byte offset) plus
//! one little-endian f32 blob `tensors.f32`. Optimizer moments are stored as
//! `optim.m/<name>` and `optim.v/<name>`.

use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

use crate::error::{NnError, Result};
use crate::optim::{AdamConfig, OptimizerState};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const FORMAT: &str = "tcr-checkpoint";
pub const BLOB: &str = "tensors.f32";

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    /// Byte offset into the blob.
    pub offset: u64,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub format: String,
    pub version: u32,
    pub dtype: String,
    pub endianness: String,
    pub blob: String,
    pub epoch: usize,
    pub optimizer: Option<OptimizerMeta>,
    pub config: serde_json::Value,
    pub tensors: Vec<TensorEntry>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct OptimizerMeta {
    pub step: u64,
    pub config: AdamConfig,
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub params: ParamStore,
    pub optimizer: Option<OptimizerState>,
    /// Number of completed epochs.
    pub epoch: usize,
    /// Model configuration, stored verbatim.
    pub config: serde_json::Value,
}

pub fn f32_to_le_bytes(data: &[f32]) -> Vec<u8> {
    data.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn f32_from_le_bytes(bytes: &[u8]) -> Vec<f32> {
    bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect()
}

impl Checkpoint {
    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut blob = Vec::new();
        let mut entries = Vec::new();
        let mut push = |name: String, shape: &[usize], data: &[f32]| {
            entries.push(TensorEntry {
                name,
                shape: shape.to_vec(),
                offset: blob.len() as u64,
            });
            blob.extend(f32_to_le_bytes(data));
        };
        for (name, t) in self.params.iter() {
            push(name.to_string(), t.shape(), t.data());
        }
        if let Some(opt) = &self.optimizer {
            for (id, (name, t)) in self.params.iter().enumerate() {
                push(format!("optim.m/{name}"), t.shape(), opt.first_moment(id));
                push(format!("optim.v/{name}"), t.shape(), opt.second_moment(id));
            }
        }
        let meta = CheckpointMeta {
            format: FORMAT.into(),
            version: 1,
            dtype: "f32".into(),
            endianness: "LE".into(),
            blob: BLOB.into(),
            epoch: self.epoch,
            optimizer: self.optimizer.as_ref().map(|o| OptimizerMeta {
                step: o.step,
                config: o.config,
            }),
            config: self.config.clone(),
            tensors: entries,
        };
        fs::write(dir.join(BLOB), blob)?;
        fs::write(dir.join("meta.json"), serde_json::to_string_pretty(&meta)?)?;
        Ok(())
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let meta: CheckpointMeta = serde_json::from_slice(&fs::read(dir.join("meta.json"))?)?;
        if meta.format != FORMAT || meta.dtype != "f32" || meta.endianness != "LE" {
            return Err(NnError::Format(format!(
                "unsupported checkpoint {} / {} / {}",
                meta.format, meta.dtype, meta.endianness
            )));
        }
        let blob = fs::read(dir.join(&meta.blob))?;
        let mut params = ParamStore::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for e in &meta.tensors {
            let n: usize = e.shape.iter().product();
            let start = e.offset as usize;
            let end = start + 4 * n;
            if end > blob.len() {
                return Err(NnError::Format(format!(
                    "tensor `{}` needs bytes {start}..{end}, blob has {}",
                    e.name,
                    blob.len()
                )));
            }
            let data = f32_from_le_bytes(&blob[start..end]);
            if let Some(_name) = e.name.strip_prefix("optim.m/") {
                m.push(data);
            } else if let Some(_name) = e.name.strip_prefix("optim.v/") {
                v.push(data);
            } else {
                params.insert(e.name.clone(), Tensor::new(&e.shape, data)?)?;
            }
        }
        let optimizer = match meta.optimizer {
            Some(o) if m.len() == params.len() && v.len() == params.len() => {
                Some(OptimizerState::from_parts(o.config, o.step, m, v))
            }
            Some(_) => return Err(NnError::Format("optimizer moments incomplete".into())),
            None => None,
        };
        Ok(Checkpoint {
            params,
            optimizer,
            epoch: meta.epoch,
            config: meta.config,
        })
    }
}
