use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::tasks::TaskKind;
use crate::{Error, Result};

/// Shape of the encoder, projector and decoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    pub encoder_layers: usize,
    pub encoder_heads: usize,
    /// Encoder width `h_e`.
    pub encoder_hidden: usize,
    pub lm_layers: usize,
    pub lm_heads: usize,
    /// Decoder width `h`.
    pub lm_hidden: usize,
    /// Compression tokens per interaction.
    pub m: usize,
    /// Longest history, in interactions.
    pub max_history: usize,
    pub vocab_size: usize,
    /// Per-interaction token cap; longer records keep their trailing tokens.
    pub max_interaction_tokens: usize,
    /// Decoder positions for instruction, BOS and target.
    pub max_text_tokens: usize,
    pub image_dim: usize,
    /// Feed-forward width as a multiple of the hidden width.
    pub ffn_mult: usize,
    pub init_std: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_layers: 2,
            encoder_heads: 2,
            encoder_hidden: 64,
            lm_layers: 2,
            lm_heads: 2,
            lm_hidden: 64,
            m: 1,
            max_history: 300,
            vocab_size: 0,
            max_interaction_tokens: 96,
            max_text_tokens: 512,
            image_dim: 16,
            ffn_mult: 4,
            init_std: 0.02,
        }
    }
}

impl ModelConfig {
    /// Full-scale reference shape (28-layer encoder, 36-layer decoder).
    /// Documented for the cost model; far too large to train here.
    pub fn full_scale(vocab_size: usize) -> Self {
        Self {
            encoder_layers: 28,
            encoder_heads: 12,
            encoder_hidden: 1536,
            lm_layers: 36,
            lm_heads: 16,
            lm_hidden: 2048,
            vocab_size,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(format!("model: {m}")));
        if self.encoder_heads == 0 || !self.encoder_hidden.is_multiple_of(self.encoder_heads) {
            return fail(format!(
                "encoder_hidden {} not divisible by encoder_heads {}",
                self.encoder_hidden, self.encoder_heads
            ));
        }
        if self.lm_heads == 0 || !self.lm_hidden.is_multiple_of(self.lm_heads) {
            return fail(format!("lm_hidden {} not divisible by lm_heads {}", self.lm_hidden, self.lm_heads));
        }
        if self.m == 0 {
            return fail("m must be positive".into());
        }
        if self.vocab_size < 7 {
            return fail(format!("vocab_size {} below the reserved entries", self.vocab_size));
        }
        if self.max_history == 0 || self.max_interaction_tokens == 0 || self.max_text_tokens < 2 {
            return fail("max_history, max_interaction_tokens and max_text_tokens must be positive".into());
        }
        if self.image_dim == 0 || self.ffn_mult == 0 {
            return fail("image_dim and ffn_mult must be positive".into());
        }
        if !(self.init_std > 0.0 && self.init_std.is_finite()) {
            return fail("init_std must be positive".into());
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_string_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }
}

/// Optimisation schedule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    /// Histories per step; each contributes one instance of every task.
    pub batch_histories: usize,
    pub lr: f64,
    pub min_lr: f64,
    pub warmup_steps: usize,
    pub weight_decay: f64,
    pub clip_norm: Option<f64>,
    pub seed: u64,
    /// Candidate-list sizes drawn for recommendation training instances.
    pub recommend_ks: Vec<usize>,
    /// Loss weight per task; absent tasks weigh 1.
    pub task_weights: BTreeMap<TaskKind, f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 1_000,
            batch_histories: 8,
            lr: 3e-4,
            min_lr: 0.0,
            warmup_steps: 50,
            weight_decay: 0.0,
            clip_norm: Some(1.0),
            seed: 0,
            recommend_ks: vec![5],
            task_weights: BTreeMap::new(),
        }
    }
}

impl TrainConfig {
    /// Full-scale schedule: lr 2.0e-6, cosine, 6,000 steps, batch 4.
    pub fn full_scale() -> Self {
        Self {
            steps: 6_000,
            batch_histories: 1,
            lr: 2.0e-6,
            ..Self::default()
        }
    }

    pub fn task_weight(&self, kind: TaskKind) -> f64 {
        self.task_weights.get(&kind).copied().unwrap_or(1.0)
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_histories == 0 {
            return Err(Error::Config("train: batch_histories must be positive".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) || self.min_lr < 0.0 || self.min_lr > self.lr {
            return Err(Error::Config("train: need 0 <= min_lr <= lr, lr > 0".into()));
        }
        if self.recommend_ks.is_empty() {
            return Err(Error::Config("train: recommend_ks must not be empty".into()));
        }
        if self.task_weights.values().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(Error::Config("train: task weights must be positive".into()));
        }
        Ok(())
    }
}
