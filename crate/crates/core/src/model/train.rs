//! Batched training: each step encodes a few histories once and trains on
//! one instance of every task attached to each of them.

use std::collections::BTreeMap;

use rand::seq::{index, IndexedRandom};

use super::network::{decode, encode_histories};
use super::{prompt_ids, scoring_item, target_ids, SerializedInteraction, UniModel};
use crate::interaction::InteractionSequence;
use crate::model::config::TrainConfig;
use crate::nn::{AdamW, AdamWConfig, CosineSchedule, Graph, Scalar, Var};
use crate::seed::stream;
use crate::tasks::{index_histories, HistoryRef, TaskInstance, TaskKind};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedTask {
    pub kind: TaskKind,
    /// Instruction ids followed by BOS.
    pub prompt: Vec<u32>,
    /// Target ids followed by EOS.
    pub target: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PreparedHistory {
    pub key: HistoryRef,
    pub interactions: Vec<SerializedInteraction>,
    pub tasks: Vec<PreparedTask>,
}

/// Tokenizes histories and attaches their tasks. Histories without tasks
/// are dropped; tasks whose history is missing are an error.
pub fn prepare<'a>(
    model: &UniModel,
    histories: &[InteractionSequence],
    tasks: impl IntoIterator<Item = &'a TaskInstance>,
) -> Result<Vec<PreparedHistory>> {
    let index = index_histories(histories);
    let mut grouped: BTreeMap<usize, Vec<PreparedTask>> = BTreeMap::new();
    let position: std::collections::HashMap<HistoryRef, usize> =
        histories.iter().enumerate().map(|(i, h)| (HistoryRef::of(h), i)).collect();
    for t in tasks {
        if !index.contains_key(&t.history_ref) {
            return Err(Error::Invalid(format!(
                "task references unknown history {}#{}",
                t.history_ref.student_id, t.history_ref.segment_index
            )));
        }
        let prompt = prompt_ids(&model.tokenizer, &t.instruction_text);
        let target = target_ids(&model.tokenizer, &t.target_text);
        if prompt.len() + target.len() - 1 > model.config.max_text_tokens {
            return Err(Error::Invalid(format!(
                "task text of {} tokens exceeds the decoder context of {}",
                prompt.len() + target.len() - 1,
                model.config.max_text_tokens
            )));
        }
        grouped.entry(position[&t.history_ref]).or_default().push(PreparedTask {
            kind: t.kind,
            prompt,
            target,
        });
    }
    Ok(grouped
        .into_iter()
        .map(|(i, tasks)| PreparedHistory {
            key: HistoryRef::of(&histories[i]),
            interactions: model.serialize(&histories[i]),
            tasks,
        })
        .collect())
}

/// Mean over task instances of the per-instance mean target NLL.
pub fn batch_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    cfg: &crate::model::ModelConfig,
    batch: &[(&PreparedHistory, Vec<&PreparedTask>)],
) -> Result<Var> {
    weighted_batch_loss(g, cfg, batch, |_| 1.0)
}

/// Weighted mean over task instances of the per-instance mean target NLL.
pub fn weighted_batch_loss<T: Scalar>(
    g: &mut Graph<'_, T>,
    cfg: &crate::model::ModelConfig,
    batch: &[(&PreparedHistory, Vec<&PreparedTask>)],
    weight: impl Fn(TaskKind) -> f64,
) -> Result<Var> {
    let hists: Vec<&[SerializedInteraction]> = batch.iter().map(|(h, _)| h.interactions.as_slice()).collect();
    let profile = encode_histories(g, cfg, &hists)?;
    let mut items = Vec::new();
    let mut spans = Vec::new();
    let mut offset = 0;
    let mut row = 0;
    for (h, tasks) in batch {
        let rows = offset..offset + h.interactions.len() * cfg.m;
        offset = rows.end;
        for t in tasks {
            items.push(scoring_item(rows.clone(), &t.prompt, &t.target));
            spans.push((row, t.target.clone(), weight(t.kind)));
            row += t.target.len();
        }
    }
    if items.is_empty() {
        return Err(Error::Invalid("empty training batch".into()));
    }
    let logits = decode(g, cfg, profile, &items)?;
    let mut total: Option<Var> = None;
    let mut weights = 0.0;
    for (start, target, w) in &spans {
        let idx: Vec<usize> = (*start..start + target.len()).collect();
        let sub = g.gather_rows(logits, &idx)?;
        let targets: Vec<Option<u32>> = target.iter().map(|&t| Some(t)).collect();
        let mut ce = g.cross_entropy(sub, &targets)?;
        if *w != 1.0 {
            ce = g.scale(ce, T::from_f64(*w));
        }
        weights += w;
        total = Some(match total {
            None => ce,
            Some(acc) => g.add(acc, ce)?,
        });
    }
    let total = total.expect("non-empty batch");
    Ok(g.scale(total, T::from_f64(1.0 / weights)))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepLog {
    /// Index of the update just applied (0-based).
    pub step: usize,
    pub loss: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

pub struct Trainer {
    pub model: UniModel,
    pub optimizer: AdamW<f32>,
    pub config: TrainConfig,
    data: Vec<PreparedHistory>,
}

pub fn schedule(cfg: &TrainConfig) -> CosineSchedule {
    CosineSchedule {
        base_lr: cfg.lr,
        min_lr: cfg.min_lr,
        warmup_steps: cfg.warmup_steps,
        total_steps: cfg.steps,
    }
}

impl Trainer {
    pub fn new(model: UniModel, config: TrainConfig, data: Vec<PreparedHistory>) -> Result<Self> {
        let opt = AdamW::new(
            &model.params,
            AdamWConfig {
                weight_decay: config.weight_decay,
                clip_norm: config.clip_norm,
                ..Default::default()
            },
            schedule(&config),
        );
        Self::resume(model, opt, config, data)
    }

    /// Continues from a saved optimizer state.
    pub fn resume(model: UniModel, optimizer: AdamW<f32>, config: TrainConfig, data: Vec<PreparedHistory>) -> Result<Self> {
        config.validate()?;
        if data.is_empty() {
            return Err(Error::Invalid("no training data".into()));
        }
        Ok(Self {
            model,
            optimizer,
            config,
            data,
        })
    }

    pub fn steps_done(&self) -> usize {
        self.optimizer.step
    }

    /// Histories for update `step` and, per history, one task of each kind.
    /// Depends only on the seed and the step index.
    pub fn select_batch(&self, step: usize) -> Vec<(usize, Vec<usize>)> {
        let mut rng = stream(self.config.seed, &format!("batch/{step}"));
        let n = self.config.batch_histories.min(self.data.len());
        index::sample(&mut rng, self.data.len(), n)
            .into_iter()
            .map(|h| {
                let mut by_kind: BTreeMap<TaskKind, Vec<usize>> = BTreeMap::new();
                for (i, t) in self.data[h].tasks.iter().enumerate() {
                    by_kind.entry(t.kind).or_default().push(i);
                }
                let picks = by_kind
                    .values()
                    .map(|v| *v.choose(&mut rng).expect("non-empty group"))
                    .collect();
                (h, picks)
            })
            .collect()
    }

    /// One optimizer update.
    pub fn step(&mut self) -> Result<StepLog> {
        let step = self.optimizer.step;
        let picks = self.select_batch(step);
        let batch: Vec<(&PreparedHistory, Vec<&PreparedTask>)> = picks
            .iter()
            .map(|(h, ts)| (&self.data[*h], ts.iter().map(|&t| &self.data[*h].tasks[t]).collect()))
            .collect();
        let (loss, grads) = {
            let mut g = Graph::with_params(&self.model.params);
            let loss = weighted_batch_loss(&mut g, &self.model.config, &batch, |k| self.config.task_weight(k))?;
            let value = g.value(loss).item() as f64;
            if !value.is_finite() {
                return Err(Error::NonFinite(format!("training loss at step {step}")));
            }
            (value, g.backward(loss)?.into_params())
        };
        let lr = self.optimizer.current_lr();
        let grad_norm = self.optimizer.step(&mut self.model.params, &grads)?;
        Ok(StepLog {
            step,
            loss,
            lr,
            grad_norm,
        })
    }

    /// Runs updates until `self.config.steps` have been applied.
    pub fn run(&mut self, mut on_step: impl FnMut(&StepLog)) -> Result<()> {
        while self.optimizer.step < self.config.steps {
            let log = self.step()?;
            on_step(&log);
        }
        Ok(())
    }

    pub fn data(&self) -> &[PreparedHistory] {
        &self.data
    }
}

/// Loss of a fixed batch under the current parameters, no update.
pub fn evaluate_loss(model: &UniModel, batch: &[(&PreparedHistory, Vec<&PreparedTask>)]) -> Result<f64> {
    let mut g = Graph::with_params(&model.params);
    let loss = batch_loss(&mut g, &model.config, batch)?;
    Ok(g.value(loss).item() as f64)
}
