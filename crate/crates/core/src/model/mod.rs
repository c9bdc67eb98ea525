//! Compressed-history encoder/decoder model.
//!
//! Each interaction is encoded independently into `m` vectors, projected to
//! the decoder width and prepended to the task instruction. The decoder is
//! trained with next-token cross-entropy on the target text only.

pub mod config;
pub mod network;
pub mod tokenizer;
pub mod train;

use std::ops::Range;
use std::path::{Path, PathBuf};

use crate::interaction::InteractionSequence;
use crate::nn::{load_checkpoint, save_checkpoint, Graph, ParamStore, Tensor};
use crate::tasks::{TaskInstance, TaskKind, FALSE_TEXT, TRUE_TEXT};
use crate::{Error, Result};

pub use config::{ModelConfig, TrainConfig};
pub use network::{serialize_interaction, DecoderItem, SerializedInteraction};
pub use tokenizer::Tokenizer;

use tokenizer::{BOS, EOS, FALSE, TRUE};

/// Token ids of an instruction followed by BOS: everything the decoder
/// reads after the profile rows before it starts emitting the target.
pub fn prompt_ids(tok: &Tokenizer, instruction: &str) -> Vec<u32> {
    let mut ids = tok.encode(instruction);
    ids.push(BOS);
    ids
}

/// Target token ids followed by EOS.
pub fn target_ids(tok: &Tokenizer, target: &str) -> Vec<u32> {
    let mut ids = tok.encode(target);
    ids.push(EOS);
    ids
}

/// Decoder item scoring `target` (which ends with EOS) after `prompt`.
pub fn scoring_item(profile: Range<usize>, prompt: &[u32], target: &[u32]) -> DecoderItem {
    let mut text = prompt.to_vec();
    text.extend_from_slice(&target[..target.len() - 1]);
    DecoderItem {
        profile,
        predict: prompt.len() - 1..text.len(),
        text,
    }
}

pub struct UniModel {
    pub config: ModelConfig,
    pub tokenizer: Tokenizer,
    pub params: ParamStore<f32>,
}

impl UniModel {
    pub fn new(config: ModelConfig, tokenizer: Tokenizer, seed: u64) -> Result<Self> {
        if config.vocab_size != tokenizer.vocab_size() {
            return Err(Error::Config(format!(
                "model vocab_size {} differs from tokenizer size {}",
                config.vocab_size,
                tokenizer.vocab_size()
            )));
        }
        let params = network::init_params(&config, seed)?;
        Ok(Self {
            config,
            tokenizer,
            params,
        })
    }

    pub fn serialize(&self, seq: &InteractionSequence) -> Vec<SerializedInteraction> {
        seq.interactions
            .iter()
            .map(|x| serialize_interaction(&self.tokenizer, x, self.config.max_interaction_tokens))
            .collect()
    }

    /// The `(n·m) × h` compressed profile of a history.
    pub fn encode_profile(&self, seq: &InteractionSequence) -> Result<Tensor<f32>> {
        self.encode_serialized(&self.serialize(seq))
    }

    pub fn encode_serialized(&self, hist: &[SerializedInteraction]) -> Result<Tensor<f32>> {
        let mut g = Graph::with_params(&self.params);
        let hp = network::encode_histories(&mut g, &self.config, &[hist])?;
        let out = g.value(hp).clone();
        if !out.all_finite() {
            return Err(Error::NonFinite("compressed profile".into()));
        }
        Ok(out)
    }

    /// Decoder input rows for a history and instruction: `n·m + |prompt|`.
    pub fn decoder_input_len(&self, seq: &InteractionSequence, instance: &TaskInstance) -> usize {
        seq.len() * self.config.m + prompt_ids(&self.tokenizer, &instance.instruction_text).len()
    }

    fn logits(&self, profile: &Tensor<f32>, items: &[DecoderItem]) -> Result<Tensor<f32>> {
        let mut g = Graph::with_params(&self.params);
        let p = g.constant(profile.clone());
        let out = network::decode(&mut g, &self.config, p, items)?;
        Ok(g.value(out).clone())
    }

    /// Per-token log-likelihoods of several targets after one prompt.
    pub fn target_log_probs(&self, profile: &Tensor<f32>, prompt: &[u32], targets: &[Vec<u32>]) -> Result<Vec<Vec<f64>>> {
        let rows = 0..profile.rows();
        let items: Vec<DecoderItem> = targets.iter().map(|t| scoring_item(rows.clone(), prompt, t)).collect();
        let logits = self.logits(profile, &items)?;
        let flat: Vec<u32> = targets.iter().flatten().copied().collect();
        let lp = network::target_log_probs(&logits, &flat);
        let mut out = Vec::with_capacity(targets.len());
        let mut off = 0;
        for t in targets {
            out.push(lp[off..off + t.len()].to_vec());
            off += t.len();
        }
        Ok(out)
    }

    /// Mean negative log-likelihood of the target text (plus EOS).
    pub fn train_loss(&self, seq: &InteractionSequence, instance: &TaskInstance) -> Result<f64> {
        let profile = self.encode_profile(seq)?;
        let prompt = prompt_ids(&self.tokenizer, &instance.instruction_text);
        let target = target_ids(&self.tokenizer, &instance.target_text);
        self.check_context(&prompt, target.len())?;
        let lp = self.target_log_probs(&profile, &prompt, &[target])?;
        Ok(-lp[0].iter().sum::<f64>() / lp[0].len() as f64)
    }

    fn check_context(&self, prompt: &[u32], target_len: usize) -> Result<()> {
        if prompt.len() + target_len - 1 > self.config.max_text_tokens {
            return Err(Error::Invalid(format!(
                "prompt of {} and target of {} tokens exceed the decoder context of {}",
                prompt.len(),
                target_len,
                self.config.max_text_tokens
            )));
        }
        Ok(())
    }

    /// Greedy token ids after `prompt`, stopping at EOS (excluded) or `max_tokens`.
    pub fn generate_ids(&self, profile: &Tensor<f32>, prompt: &[u32], max_tokens: usize) -> Result<Vec<u32>> {
        let mut text = prompt.to_vec();
        let mut out = Vec::new();
        while out.len() < max_tokens && text.len() < self.config.max_text_tokens {
            let item = DecoderItem {
                profile: 0..profile.rows(),
                predict: text.len() - 1..text.len(),
                text: text.clone(),
            };
            let logits = self.logits(profile, &[item])?;
            let row = logits.row(0);
            let next = row
                .iter()
                .enumerate()
                .fold((0usize, f32::NEG_INFINITY), |best, (i, &x)| if x > best.1 { (i, x) } else { best })
                .0 as u32;
            if next == EOS {
                break;
            }
            out.push(next);
            text.push(next);
        }
        Ok(out)
    }

    pub fn generate_from_profile(&self, profile: &Tensor<f32>, instance: &TaskInstance, max_tokens: usize) -> Result<String> {
        let prompt = prompt_ids(&self.tokenizer, &instance.instruction_text);
        let ids = self.generate_ids(profile, &prompt, max_tokens)?;
        Ok(self.tokenizer.decode(&ids))
    }

    /// Greedy decoding of the target text.
    pub fn generate(&self, seq: &InteractionSequence, instance: &TaskInstance, max_tokens: usize) -> Result<String> {
        if max_tokens == 0 {
            return Ok(String::new());
        }
        let profile = self.encode_profile(seq)?;
        self.generate_from_profile(&profile, instance, max_tokens)
    }

    pub fn score_candidates_from_profile(&self, profile: &Tensor<f32>, instance: &TaskInstance) -> Result<Vec<(String, f64)>> {
        let candidates = instance
            .candidates
            .as_ref()
            .filter(|c| !c.is_empty())
            .ok_or_else(|| Error::Invalid("score_candidates needs a non-empty candidate list".into()))?;
        let prompt = prompt_ids(&self.tokenizer, &instance.instruction_text);
        let targets: Vec<Vec<u32>> = candidates.iter().map(|c| target_ids(&self.tokenizer, c)).collect();
        let lps = self.target_log_probs(profile, &prompt, &targets)?;
        let mut scored: Vec<(String, f64)> = candidates
            .iter()
            .zip(lps)
            .map(|(c, lp)| (c.clone(), lp.iter().sum::<f64>() / lp.len() as f64))
            .collect();
        rank_scores(&mut scored);
        Ok(scored)
    }

    /// Candidates ranked by mean per-token log-likelihood (target + EOS),
    /// highest first; ties by concept string.
    pub fn score_candidates(&self, seq: &InteractionSequence, instance: &TaskInstance) -> Result<Vec<(String, f64)>> {
        let profile = self.encode_profile(seq)?;
        self.score_candidates_from_profile(&profile, instance)
    }

    /// Top candidate by free generation rather than likelihood: the
    /// generated text if it names a candidate, otherwise the best-scored one.
    pub fn recommend_by_generation(&self, profile: &Tensor<f32>, instance: &TaskInstance) -> Result<String> {
        let text = self.generate_from_profile(profile, instance, 32)?;
        let candidates = instance.candidates.as_deref().unwrap_or_default();
        if let Some(c) = candidates.iter().find(|c| c.trim() == text.trim()) {
            return Ok(c.clone());
        }
        Ok(self.score_candidates_from_profile(profile, instance)?.remove(0).0)
    }

    pub fn classify_trace_from_profile(&self, profile: &Tensor<f32>, instance: &TaskInstance) -> Result<String> {
        let prompt = prompt_ids(&self.tokenizer, &instance.instruction_text);
        let lps = self.target_log_probs(profile, &prompt, &[vec![TRUE, EOS], vec![FALSE, EOS]])?;
        let (t, f): (f64, f64) = (lps[0].iter().sum(), lps[1].iter().sum());
        Ok(if t > f { TRUE_TEXT } else { FALSE_TEXT }.to_string())
    }

    /// `[True]` when its sequence likelihood is strictly higher, else `[False]`.
    pub fn classify_trace(&self, seq: &InteractionSequence, instance: &TaskInstance) -> Result<String> {
        if instance.kind != TaskKind::Trace {
            return Err(Error::Invalid("classify_trace needs a Trace instance".into()));
        }
        let profile = self.encode_profile(seq)?;
        self.classify_trace_from_profile(&profile, instance)
    }

    /// Writes `<path>`, `<path>.config.json` and `<path>.tokenizer.json`.
    pub fn save(&self, path: impl AsRef<Path>, optimizer: Option<&crate::nn::AdamW<f32>>) -> Result<()> {
        let path = path.as_ref();
        save_checkpoint(path, &self.params, optimizer)?;
        self.config.save(sidecar(path, "config.json"))?;
        self.tokenizer.save(sidecar(path, "tokenizer.json"))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<(Self, Option<crate::nn::AdamW<f32>>)> {
        let path = path.as_ref();
        let config = ModelConfig::load(sidecar(path, "config.json"))?;
        let tokenizer = Tokenizer::load(sidecar(path, "tokenizer.json"))?;
        let ckpt = load_checkpoint(path)?;
        let expected = network::param_layout(&config);
        if ckpt.params.len() != expected.len()
            || expected
                .iter()
                .enumerate()
                .any(|(i, (n, s, _))| ckpt.params.name(i) != n || ckpt.params.get(i).shape() != s)
        {
            return Err(Error::Invalid(format!(
                "{}: parameters do not match the config sidecar",
                path.display()
            )));
        }
        Ok((
            Self {
                config,
                tokenizer,
                params: ckpt.params,
            },
            ckpt.optimizer,
        ))
    }
}

/// `run/model.ckpt` → `run/model.ckpt.<suffix>`.
pub fn sidecar(path: &Path, suffix: &str) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".");
    s.push(suffix);
    PathBuf::from(s)
}

/// Descending by score, ascending by name on ties.
pub fn rank_scores(scored: &mut [(String, f64)]) {
    scored.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
}

#[cfg(test)]
mod tests;
