//! Versioned checkpoint container.
//!
//! Layout: magic `XDCK`, `u32` format version, `u64` header length, a JSON
//! header, then every tensor as little-endian `f64` in header order.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::diffusion::ScheduleSpec;
use crate::error::{Error, Result};
use crate::features::FeatureStats;
use crate::model::{CrossDiffModel, ModelConfig};
use crate::optim::{AdamW, Moments};
use crate::text::EmbedderSpec;
use crate::training::{Stage, TrainConfig};

const MAGIC: &[u8; 4] = b"XDCK";
pub const FORMAT_VERSION: u32 = 1;

/// Where a training run stood when the checkpoint was written.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainProgress {
    pub stage: Stage,
    /// Optimizer steps completed in this stage.
    pub step: usize,
    pub config: TrainConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub model: ModelConfig,
    pub schedule: ScheduleSpec,
    pub stats_3d: FeatureStats,
    pub stats_2d: FeatureStats,
    pub skeleton_hash: String,
    pub embedder: EmbedderSpec,
    /// Set once stage I has completed at least one step.
    pub stage_one_trained: bool,
    pub progress: Option<TrainProgress>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: Moments,
    pub v: Moments,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub meta: CheckpointMeta,
    pub params: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
    pub optimizer: Option<OptimizerState>,
}

#[derive(Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: CheckpointMeta,
    params: Vec<TensorEntry>,
    optimizer_step: Option<u64>,
    optimizer_m: Vec<TensorEntry>,
    optimizer_v: Vec<TensorEntry>,
}

fn entries(map: &BTreeMap<String, (Vec<usize>, Vec<f64>)>) -> Vec<TensorEntry> {
    map.iter()
        .map(|(name, (shape, _))| TensorEntry {
            name: name.clone(),
            shape: shape.clone(),
        })
        .collect()
}

fn read_tensors(
    path: &Path,
    list: &[TensorEntry],
    payload: &mut &[u8],
) -> Result<BTreeMap<String, (Vec<usize>, Vec<f64>)>> {
    let mut out = BTreeMap::new();
    for e in list {
        let count: usize = e.shape.iter().product();
        if payload.len() < count * 8 {
            return Err(Error::format(path, format!("payload truncated in tensor {}", e.name)));
        }
        let (head, rest) = payload.split_at(count * 8);
        let values = head
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        *payload = rest;
        out.insert(e.name.clone(), (e.shape.clone(), values));
    }
    Ok(out)
}

impl Checkpoint {
    /// Snapshot of a model and, optionally, its optimizer.
    pub fn capture(meta: CheckpointMeta, model: &CrossDiffModel, optimizer: Option<&AdamW>) -> Result<Self> {
        let optimizer = match optimizer {
            Some(opt) => {
                let (step, m, v) = opt.export()?;
                Some(OptimizerState { step, m, v })
            }
            None => None,
        };
        Ok(Self {
            meta,
            params: model.params().export()?,
            optimizer,
        })
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = Header {
            meta: self.meta.clone(),
            params: entries(&self.params),
            optimizer_step: self.optimizer.as_ref().map(|o| o.step),
            optimizer_m: self.optimizer.as_ref().map(|o| entries(&o.m)).unwrap_or_default(),
            optimizer_v: self.optimizer.as_ref().map(|o| entries(&o.v)).unwrap_or_default(),
        };
        let json = serde_json::to_vec(&header)?;
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u64).to_le_bytes());
        out.extend_from_slice(&json);
        let mut push = |map: &BTreeMap<String, (Vec<usize>, Vec<f64>)>| {
            for (_, values) in map.values() {
                for v in values {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
        };
        push(&self.params);
        if let Some(o) = &self.optimizer {
            push(&o.m);
            push(&o.v);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        f.write_all(&bytes).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)
            .and_then(|mut f| f.read_to_end(&mut bytes))
            .map_err(|e| Error::io(path, e))?;
        Self::from_bytes(path, &bytes)
    }

    pub fn from_bytes(path: &Path, bytes: &[u8]) -> Result<Self> {
        if bytes.len() < 16 || &bytes[..4] != MAGIC {
            return Err(Error::format(path, "not a checkpoint file"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != FORMAT_VERSION {
            return Err(Error::format(
                path,
                format!("checkpoint format {version}, expected {FORMAT_VERSION}"),
            ));
        }
        let len = u64::from_le_bytes(bytes[8..16].try_into().expect("8 bytes")) as usize;
        if bytes.len() < 16 + len {
            return Err(Error::format(path, "header truncated"));
        }
        let header: Header = serde_json::from_slice(&bytes[16..16 + len])
            .map_err(|e| Error::format(path, format!("bad header: {e}")))?;
        let mut payload = &bytes[16 + len..];
        let params = read_tensors(path, &header.params, &mut payload)?;
        let optimizer = match header.optimizer_step {
            Some(step) => Some(OptimizerState {
                step,
                m: read_tensors(path, &header.optimizer_m, &mut payload)?,
                v: read_tensors(path, &header.optimizer_v, &mut payload)?,
            }),
            None => None,
        };
        if !payload.is_empty() {
            return Err(Error::format(path, "trailing bytes after payload"));
        }
        Ok(Self {
            meta: header.meta,
            params,
            optimizer,
        })
    }

    /// Rebuilds the model with the stored parameters.
    pub fn model(&self) -> Result<CrossDiffModel> {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let model = CrossDiffModel::new(self.meta.model.clone(), &mut rng)?;
        model.params().import(&self.params)?;
        Ok(model)
    }

    /// Restores optimizer moments into `optimizer` for `model`.
    pub fn restore_optimizer(&self, model: &CrossDiffModel, optimizer: &mut AdamW) -> Result<()> {
        if let Some(o) = &self.optimizer {
            optimizer.import(model.params(), o.step, &o.m, &o.v)?;
        }
        Ok(())
    }
}
