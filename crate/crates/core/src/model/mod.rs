//! Tiny decoder-only causal language model with hand-derived reverse-mode
//! gradients.
//!
//! Architecture: token embedding plus fixed sinusoidal positions, `n_layers`
//! pre-norm blocks (causal multi-head attention, GELU MLP), a final layer
//! norm and a linear output head. The output head starts at zero, so an
//! untrained model predicts exactly the uniform distribution over the vocab.
//! All math is f64.

mod checkpoint;
mod infer;
pub mod ops;
mod transformer;

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::seed;
use crate::tokenizer::Vocab;

pub use checkpoint::{fnv1a64, load_checkpoint, save_checkpoint};
pub use infer::{generate, sequence_logprob, GenerateOptions, LogProbResult};
pub use transformer::Tape;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    Config(String),
    #[error("sequence of {len} tokens exceeds the model context of {max}")]
    ContextOverflow { len: usize, max: usize },
    #[error("token id {0} is outside the vocabulary")]
    InvalidToken(u16),
    #[error("scored target must contain at least one token")]
    EmptyTarget,
    #[error("scoring needs a non-empty prefix")]
    EmptyPrefix,
    #[error("corrupt checkpoint: {0}")]
    CorruptCheckpoint(String),
    #[error("checkpoint {path}: {source}")]
    Io { path: std::path::PathBuf, source: std::io::Error },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default = "default_vocab")]
    pub vocab: usize,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub max_ctx: usize,
}

fn default_vocab() -> usize {
    Vocab::SIZE
}

impl ModelConfig {
    pub fn new(d_model: usize, n_layers: usize, n_heads: usize, max_ctx: usize) -> Self {
        Self { vocab: Vocab::SIZE, d_model, n_layers, n_heads, max_ctx }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.vocab != Vocab::SIZE {
            return Err(ModelError::Config(format!("vocab must be {}, got {}", Vocab::SIZE, self.vocab)));
        }
        if self.d_model == 0 || self.n_layers == 0 || self.n_heads == 0 || self.max_ctx == 0 {
            return Err(ModelError::Config("all dimensions must be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(ModelError::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        Ok(())
    }

    pub fn d_ff(&self) -> usize {
        4 * self.d_model
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Named parameter arrays in storage order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let (v, d, f) = (self.vocab, self.d_model, self.d_ff());
        let mut out = vec![("tok_emb".to_string(), vec![v, d])];
        for l in 0..self.n_layers {
            let p = |n: &str| format!("blocks.{l}.{n}");
            out.extend([
                (p("ln1.g"), vec![d]),
                (p("ln1.b"), vec![d]),
                (p("attn.wq"), vec![d, d]),
                (p("attn.wk"), vec![d, d]),
                (p("attn.wv"), vec![d, d]),
                (p("attn.wo"), vec![d, d]),
                (p("ln2.g"), vec![d]),
                (p("ln2.b"), vec![d]),
                (p("mlp.w1"), vec![d, f]),
                (p("mlp.b1"), vec![f]),
                (p("mlp.w2"), vec![f, d]),
                (p("mlp.b2"), vec![d]),
            ]);
        }
        out.extend([
            ("lnf.g".to_string(), vec![d]),
            ("lnf.b".to_string(), vec![d]),
            ("head.w".to_string(), vec![d, v]),
            ("head.b".to_string(), vec![v]),
        ]);
        out
    }
}

/// Offsets of one named array inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParamSlot {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
    pub len: usize,
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct BlockOffsets {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    pub wo: usize,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Debug, Clone)]
pub(crate) struct Layout {
    pub slots: Vec<ParamSlot>,
    pub total: usize,
    pub tok_emb: usize,
    pub blocks: Vec<BlockOffsets>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub head_w: usize,
    pub head_b: usize,
}

impl Layout {
    fn new(config: &ModelConfig) -> Self {
        let mut slots = Vec::new();
        let mut offset = 0;
        for (name, shape) in config.param_shapes() {
            let len = shape.iter().product();
            slots.push(ParamSlot { name, shape, offset, len });
            offset += len;
        }
        let at = |name: &str| slots.iter().find(|s| s.name == name).expect("known parameter").offset;
        let blocks = (0..config.n_layers)
            .map(|l| {
                let b = |n: &str| at(&format!("blocks.{l}.{n}"));
                BlockOffsets {
                    ln1_g: b("ln1.g"),
                    ln1_b: b("ln1.b"),
                    wq: b("attn.wq"),
                    wk: b("attn.wk"),
                    wv: b("attn.wv"),
                    wo: b("attn.wo"),
                    ln2_g: b("ln2.g"),
                    ln2_b: b("ln2.b"),
                    w1: b("mlp.w1"),
                    b1: b("mlp.b1"),
                    w2: b("mlp.w2"),
                    b2: b("mlp.b2"),
                }
            })
            .collect();
        Layout {
            tok_emb: at("tok_emb"),
            blocks,
            lnf_g: at("lnf.g"),
            lnf_b: at("lnf.b"),
            head_w: at("head.w"),
            head_b: at("head.b"),
            slots,
            total: offset,
        }
    }
}

/// Parameters plus architecture of the model. Immutable during inference;
/// training mutates `params` through [`ModelState::params_mut`].
#[derive(Debug, Clone)]
pub struct ModelState {
    config: ModelConfig,
    seed: u64,
    layout: Layout,
    params: Vec<f64>,
}

impl PartialEq for ModelState {
    fn eq(&self, other: &Self) -> bool {
        self.config == other.config
            && self.seed == other.seed
            && self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

impl ModelState {
    /// Deterministic initialization. Projections are N(0, 0.02) (residual
    /// outputs scaled by 1/sqrt(2·layers)); the output head is zero.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(&config);
        let mut params = vec![0.0; layout.total];
        let mut rng = seed::rng(seed::derive(seed, &[0x1417]));
        let resid_std = 0.02 / (2.0 * config.n_layers as f64).sqrt();
        for slot in &layout.slots {
            let std = match slot.name.rsplit('.').next().unwrap_or("") {
                "tok_emb" => 1.0,
                "wq" | "wk" | "wv" | "w1" => 0.02,
                "wo" | "w2" => resid_std,
                "g" => {
                    params[slot.offset..slot.offset + slot.len].fill(1.0);
                    continue;
                }
                _ => continue,
            };
            let normal = Normal::new(0.0, std).expect("valid std");
            for p in &mut params[slot.offset..slot.offset + slot.len] {
                *p = normal.sample(&mut rng);
            }
        }
        Ok(Self { config, seed, layout, params })
    }

    pub(crate) fn from_parts(config: ModelConfig, seed: u64, params: Vec<f64>) -> Result<Self, ModelError> {
        config.validate()?;
        let layout = Layout::new(&config);
        if params.len() != layout.total {
            return Err(ModelError::Config(format!("expected {} parameters, got {}", layout.total, params.len())));
        }
        Ok(Self { config, seed, layout, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_params(&self) -> usize {
        self.params.len()
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.layout.slots
    }

    pub(crate) fn layout(&self) -> &Layout {
        &self.layout
    }

    pub fn param(&self, name: &str) -> Option<&[f64]> {
        self.slot(name).map(|s| &self.params[s.offset..s.offset + s.len])
    }

    pub fn param_mut(&mut self, name: &str) -> Option<&mut [f64]> {
        let (offset, len) = self.slot(name).map(|s| (s.offset, s.len))?;
        Some(&mut self.params[offset..offset + len])
    }

    fn slot(&self, name: &str) -> Option<&ParamSlot> {
        self.layout.slots.iter().find(|s| s.name == name)
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(|p| p.is_finite())
    }

    /// FNV-1a 64 over the little-endian parameter payload; identical to the
    /// trailing hash of the checkpoint file.
    pub fn content_hash(&self) -> u64 {
        let mut h = checkpoint::Fnv1a::new();
        for p in &self.params {
            h.update(&p.to_le_bytes());
        }
        h.finish()
    }

    pub fn hash_hex(&self) -> String {
        format!("{:016x}", self.content_hash())
    }

    pub(crate) fn check_ids(&self, ids: &[u16]) -> Result<(), ModelError> {
        if ids.len() > self.config.max_ctx {
            return Err(ModelError::ContextOverflow { len: ids.len(), max: self.config.max_ctx });
        }
        match ids.iter().find(|&&id| id as usize >= self.config.vocab) {
            Some(&id) => Err(ModelError::InvalidToken(id)),
            None => Ok(()),
        }
    }
}
