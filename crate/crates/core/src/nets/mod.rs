//! Differentiable components: GINE encoder with attention pooling, transformer
//! decoder, task learner and discriminator, plus a JSON checkpoint format.

mod decoder;
mod graph;
mod layers;

use std::path::Path;

use serde::{Deserialize, Serialize};

pub use decoder::{sinusoidal_positions, Decoder, DecoderBlock, TokenBatch};
pub use graph::{
    featurize_all, Discriminator, Encoder, EncoderOutput, GineLayer, GineStack, GraphBatch,
    MolFeatures, TaskLearner, TaskOutput,
};
pub use layers::{dropout_mask, glorot, Fwd, LayerNorm, Linear, MultiHeadAttention};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seeding::Rng;
use crate::tensor::{Mat, ParamStore, Tape};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetConfig {
    pub width: usize,
    pub heads: usize,
    pub gine_layers: usize,
    pub decoder_blocks: usize,
    pub dropout: f64,
    pub max_len: usize,
}

impl Default for NetConfig {
    fn default() -> Self {
        Self {
            width: 300,
            heads: 4,
            gine_layers: 5,
            decoder_blocks: 3,
            dropout: 0.2,
            max_len: 256,
        }
    }
}

impl NetConfig {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.heads == 0 || !self.width.is_multiple_of(self.heads) {
            return Err(Error::Config(format!(
                "width {} must be a positive multiple of heads {}",
                self.width, self.heads
            )));
        }
        if self.gine_layers == 0 {
            return Err(Error::Config("at least one GINE layer is required".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} not in [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

/// Translator (encoder + decoder) and discriminator, each with its own store.
#[derive(Debug, Clone)]
pub struct QueryingModule<T> {
    pub translator: ParamStore<T>,
    pub encoder: Encoder,
    pub decoder: Decoder,
    pub critic: ParamStore<T>,
    pub discriminator: Discriminator,
}

impl<T: Scalar> QueryingModule<T> {
    pub fn new(cfg: &NetConfig, vocab_size: usize, rng: &mut Rng) -> Self {
        let mut translator = ParamStore::new();
        let encoder = Encoder::new(&mut translator, cfg.width, cfg.gine_layers, cfg.heads, rng);
        let decoder = Decoder::new(
            &mut translator,
            vocab_size,
            cfg.width,
            cfg.decoder_blocks,
            cfg.heads,
            cfg.max_len,
            rng,
        );
        let mut critic = ParamStore::new();
        let discriminator = Discriminator::new(&mut critic, cfg.width, rng);
        Self {
            translator,
            encoder,
            decoder,
            critic,
            discriminator,
        }
    }

    /// Graph embeddings `z`, one row per molecule, evaluated in chunks.
    pub fn embed(&self, mols: &[&MolFeatures<T>], chunk: usize) -> Mat<T> {
        let mut rows = Vec::with_capacity(mols.len());
        for part in mols.chunks(chunk.max(1)) {
            let batch = GraphBatch::pack(part);
            let mut tape = Tape::new();
            let mut f = Fwd::frozen(&mut tape, &self.translator);
            let out = self.encoder.forward(&mut f, &batch);
            rows.push(tape.value(out.z).clone());
        }
        stack_rows(rows, self.encoder.width)
    }

    /// Discriminator scores of precomputed embeddings.
    pub fn scores(&self, z: &Mat<T>) -> Vec<T> {
        let mut tape = Tape::new();
        let mut f = Fwd::frozen(&mut tape, &self.critic);
        let x = f.tape.constant(z.clone());
        let s = self.discriminator.forward(&mut f, x);
        tape.value(s).column(0).to_vec()
    }
}

/// Task learner with its parameter store.
#[derive(Debug, Clone)]
pub struct TaskModel<T> {
    pub store: ParamStore<T>,
    pub learner: TaskLearner,
}

/// Deterministic outputs of the task learner over a set of molecules.
#[derive(Debug, Clone)]
pub struct TaskPredictions<T> {
    pub pooled: Mat<T>,
    pub predictions: Mat<T>,
}

impl<T: Scalar> TaskModel<T> {
    pub fn new(cfg: &NetConfig, outputs: usize, rng: &mut Rng) -> Self {
        let mut store = ParamStore::new();
        let learner = TaskLearner::new(&mut store, cfg.width, cfg.gine_layers, outputs, cfg.dropout, rng);
        Self { store, learner }
    }

    /// Evaluates in chunks; with `dropout`, each chunk draws fresh masks.
    pub fn predict(
        &self,
        mols: &[&MolFeatures<T>],
        chunk: usize,
        mut dropout: Option<&mut Rng>,
    ) -> TaskPredictions<T> {
        let mut pooled = Vec::new();
        let mut preds = Vec::new();
        for part in mols.chunks(chunk.max(1)) {
            let batch = GraphBatch::pack(part);
            let mut tape = Tape::new();
            let mut f = Fwd::frozen(&mut tape, &self.store);
            let out = self.learner.forward(&mut f, &batch, dropout.as_deref_mut());
            pooled.push(tape.value(out.pooled).clone());
            preds.push(tape.value(out.predictions).clone());
        }
        TaskPredictions {
            pooled: stack_rows(pooled, self.learner.head.in_dim),
            predictions: stack_rows(preds, self.learner.outputs),
        }
    }

    /// Mean-pooled node states after layer `k` (0-based), one row per molecule.
    pub fn pooled_layer(&self, mols: &[&MolFeatures<T>], k: usize, chunk: usize) -> Mat<T> {
        let mut rows = Vec::new();
        for part in mols.chunks(chunk.max(1)) {
            let batch = GraphBatch::pack(part);
            let mut tape = Tape::new();
            let mut f = Fwd::frozen(&mut tape, &self.store);
            let states = self.learner.gnn.forward(&mut f, &batch);
            let g = tape.segment_mean(states[k], &batch.segments);
            rows.push(tape.value(g).clone());
        }
        stack_rows(rows, self.learner.head.in_dim)
    }
}

pub(crate) fn stack_rows<T: Scalar>(parts: Vec<Mat<T>>, width: usize) -> Mat<T> {
    if parts.is_empty() {
        return Mat::zeros((0, width));
    }
    let views: Vec<_> = parts.iter().map(|m| m.view()).collect();
    ndarray::concatenate(ndarray::Axis(0), &views).expect("equal widths")
}

pub const CHECKPOINT_FORMAT: &str = "molal-params";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ParamEntry {
    pub name: String,
    pub shape: [usize; 2],
    pub data: Vec<f64>,
}

/// Self-describing parameter dump: every named matrix with its shape, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub scalar: String,
    pub params: Vec<ParamEntry>,
}

impl Checkpoint {
    pub fn capture<T: Scalar>(stores: &[&ParamStore<T>], config_hash: &str) -> Self {
        let params = stores
            .iter()
            .flat_map(|s| s.iter())
            .map(|(name, m)| ParamEntry {
                name: name.to_string(),
                shape: [m.nrows(), m.ncols()],
                data: m.iter().map(|v| v.to_f64_lossy()).collect(),
            })
            .collect();
        Self {
            format: CHECKPOINT_FORMAT.into(),
            version: CHECKPOINT_VERSION,
            config_hash: config_hash.into(),
            scalar: T::NAME.into(),
            params,
        }
    }

    /// Copies every stored matrix back by name; all names and shapes must match.
    pub fn restore<T: Scalar>(&self, stores: &mut [&mut ParamStore<T>]) -> Result<()> {
        if self.format != CHECKPOINT_FORMAT || self.version != CHECKPOINT_VERSION {
            return Err(Error::Invalid(format!(
                "unsupported checkpoint {} v{}",
                self.format, self.version
            )));
        }
        let expected: usize = stores.iter().map(|s| s.len()).sum();
        if expected != self.params.len() {
            return Err(Error::Invalid(format!(
                "checkpoint has {} parameters, model has {expected}",
                self.params.len()
            )));
        }
        for entry in &self.params {
            let slot = stores.iter_mut().find_map(|s| s.find(&entry.name).map(|id| (s, id)));
            let Some((store, id)) = slot else {
                return Err(Error::Invalid(format!("unknown parameter {}", entry.name)));
            };
            let target = store.get_mut(id);
            if target.dim() != (entry.shape[0], entry.shape[1])
                || entry.data.len() != entry.shape[0] * entry.shape[1]
            {
                return Err(Error::Invalid(format!("shape mismatch for {}", entry.name)));
            }
            for (dst, &src) in target.iter_mut().zip(&entry.data) {
                *dst = T::from_f64_lossy(src);
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}
