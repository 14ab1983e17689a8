//! A miniature seeded decoder-only transformer.
//!
//! No training and no checkpoints: weights are Gaussian (sigma 0.02) drawn
//! from a ChaCha20 stream keyed by the config seed, with RMS-norm layers
//! and rotary positions. Identical (config, seed) gives bit-identical
//! weights, and all accumulations run in f32 with a fixed summation order
//! so cached tensors can be compared at tight tolerances.

mod forward;
mod kv;
mod tokenizer;

pub use forward::GroupAttention;
pub use kv::{KVBlock, LayerKv, KV_HEADER_BYTES};
pub(crate) use tokenizer::fnv1a64 as stable_hash;
pub use tokenizer::{TokenSeq, Tokenizer};

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub num_heads: usize,
    pub model_dim: usize,
    pub vocab_size: u32,
    pub rope_base: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            num_layers: 8,
            num_heads: 4,
            model_dim: 128,
            vocab_size: 4096,
            rope_base: 10000.0,
            seed: 42,
        }
    }
}

impl ModelConfig {
    /// A reduced scale for store- and simulation-heavy runs where the
    /// attention math itself is not under test.
    pub fn small() -> Self {
        ModelConfig {
            num_layers: 2,
            num_heads: 2,
            model_dim: 32,
            vocab_size: 4096,
            rope_base: 10000.0,
            seed: 42,
        }
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }

    pub fn hidden_dim(&self) -> usize {
        4 * self.model_dim
    }

    /// Serialized KV bytes one token contributes to a group block.
    pub fn kv_bytes_per_token(&self) -> u64 {
        2 * self.num_layers as u64 * self.model_dim as u64 * 4
    }

    pub fn validate(&self) -> crate::Result<()> {
        if self.num_layers == 0 || self.num_heads == 0 || self.model_dim == 0 || self.vocab_size == 0
        {
            return Err(crate::Error::InvalidConfig(
                "model dims must all be >= 1".into(),
            ));
        }
        if !self.model_dim.is_multiple_of(self.num_heads) {
            return Err(crate::Error::InvalidConfig(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(crate::Error::InvalidConfig(format!(
                "head_dim {} must be even for rotary positions",
                self.head_dim()
            )));
        }
        Ok(())
    }
}

/// Weights of one transformer layer, each matrix row-major `[out][in]`.
/// RMS-norm gains are fixed at 1.0 and not stored.
#[derive(Debug, Clone)]
pub struct LayerWeights {
    pub wq: Vec<f32>,
    pub wk: Vec<f32>,
    pub wv: Vec<f32>,
    pub wo: Vec<f32>,
    pub w_up: Vec<f32>,
    pub w_down: Vec<f32>,
}

#[derive(Debug)]
pub struct TinyModel {
    cfg: ModelConfig,
    tokenizer: Tokenizer,
    pub embed: Vec<f32>,
    pub layers: Vec<LayerWeights>,
    pub unembed: Vec<f32>,
}

impl TinyModel {
    pub fn new(cfg: ModelConfig) -> crate::Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha20Rng::seed_from_u64(cfg.seed);
        let normal = Normal::<f32>::new(0.0, 0.02).expect("valid sigma");
        let mut draw = |n: usize| -> Vec<f32> {
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        };

        let d = cfg.model_dim;
        let hidden = cfg.hidden_dim();
        let vocab = cfg.vocab_size as usize;
        let embed = draw(vocab * d);
        let layers = (0..cfg.num_layers)
            .map(|_| LayerWeights {
                wq: draw(d * d),
                wk: draw(d * d),
                wv: draw(d * d),
                wo: draw(d * d),
                w_up: draw(hidden * d),
                w_down: draw(d * hidden),
            })
            .collect();
        let unembed = draw(vocab * d);

        Ok(TinyModel {
            tokenizer: Tokenizer::new(cfg.vocab_size, cfg.seed),
            cfg,
            embed,
            layers,
            unembed,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn tokenizer(&self) -> &Tokenizer {
        &self.tokenizer
    }

    pub fn tokenize(&self, text: &str) -> TokenSeq {
        self.tokenizer.tokenize(text)
    }
}
