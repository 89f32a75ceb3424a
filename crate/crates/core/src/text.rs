//! Pluggable text embedders.
//!
//! The denoiser only sees fixed-width text vectors. [`HashEmbedder`] is a
//! deterministic stand-in that needs no model weights; [`TableEmbedder`]
//! serves vectors precomputed by an external sentence encoder.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

pub trait TextEmbedder: Send + Sync {
    fn dim(&self) -> usize;
    fn embed(&self, text: &str) -> Result<Vec<f64>>;
    /// Identifier recorded in checkpoints.
    fn describe(&self) -> EmbedderSpec;
}

/// Serializable embedder choice.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum EmbedderSpec {
    Hash { dim: usize, seed: u64 },
    Table { path: String, dim: usize },
}

impl EmbedderSpec {
    pub fn build(&self) -> Result<Box<dyn TextEmbedder>> {
        match self {
            EmbedderSpec::Hash { dim, seed } => Ok(Box::new(HashEmbedder::new(*dim, *seed))),
            EmbedderSpec::Table { path, .. } => Ok(Box::new(TableEmbedder::load(Path::new(path))?)),
        }
    }
}

/// Unit-norm Gaussian vector seeded by SHA-256 of the seed and the text.
#[derive(Clone, Debug)]
pub struct HashEmbedder {
    dim: usize,
    seed: u64,
}

impl HashEmbedder {
    pub fn new(dim: usize, seed: u64) -> Self {
        Self { dim, seed }
    }
}

impl TextEmbedder for HashEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(text.trim().as_bytes());
        let digest: [u8; 32] = hasher.finalize().into();
        let mut rng = ChaCha8Rng::from_seed(digest);
        let mut v: Vec<f64> = (0..self.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        v.iter_mut().for_each(|x| *x /= norm);
        Ok(v)
    }

    fn describe(&self) -> EmbedderSpec {
        EmbedderSpec::Hash {
            dim: self.dim,
            seed: self.seed,
        }
    }
}

/// Lookup table loaded from a JSON object `{ "text": [f64, ...], ... }`.
#[derive(Clone, Debug)]
pub struct TableEmbedder {
    path: String,
    dim: usize,
    table: BTreeMap<String, Vec<f64>>,
}

impl TableEmbedder {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let table: BTreeMap<String, Vec<f64>> = serde_json::from_str(&text)?;
        let dim = table
            .values()
            .next()
            .map(|v| v.len())
            .ok_or_else(|| Error::format(path, "embedding table is empty"))?;
        if table.values().any(|v| v.len() != dim) {
            return Err(Error::format(path, "embedding widths differ"));
        }
        Ok(Self {
            path: path.display().to_string(),
            dim,
            table,
        })
    }
}

impl TextEmbedder for TableEmbedder {
    fn dim(&self) -> usize {
        self.dim
    }

    fn embed(&self, text: &str) -> Result<Vec<f64>> {
        self.table
            .get(text.trim())
            .cloned()
            .ok_or_else(|| Error::Data(format!("no embedding for text {text:?}")))
    }

    fn describe(&self) -> EmbedderSpec {
        EmbedderSpec::Table {
            path: self.path.clone(),
            dim: self.dim,
        }
    }
}
