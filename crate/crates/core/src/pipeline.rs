//! End-to-end experiment steps over one output directory:
//! simulate → build-tasks → train → eval, plus the cost model and the
//! compression-token sweep.
//!
//! ```text
//! <out>/data/cohort.jsonl, cohort.truth.json, stats.txt
//! <out>/tasks/histories.jsonl, train/*.jsonl, test/*.jsonl, leakage.json
//! <out>/model/model.ckpt (+ sidecars), loss.csv
//! <out>/eval/report.json, report.txt
//! <out>/sweep/m<m>/..., sweep/report.json
//! <out>/manifests/<command>.json
//! ```

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::cohort::{cohort_stats, generate_cohort, truth_path, CohortConfig, CountRange, GroundTruth, StatsReport};
use crate::interaction::{load_dataset, save_dataset, Interaction, InteractionSequence};
use crate::metrics::{
    accuracy, exact_match, majority_baseline, mae, median, precision_at_1, time_mae, AnswerScore, EvalReport,
    RecommendScore, TimeScore, TraceScore,
};
use crate::model::train::{prepare, StepLog, Trainer};
use crate::model::{prompt_ids, ModelConfig, TrainConfig, Tokenizer, UniModel};
use crate::tasks::{
    build_all, index_histories, scan_leakage, split_students, LeakageReport, TaskInstance, TaskKind, TaskSet,
    CANDIDATE_SIZES,
};
use crate::vram::{self, ModelShape};
use crate::{Error, Result};

/// Everything a run needs; written back out as each command's manifest.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    /// Master seed; copied into the cohort and training seeds.
    pub seed: u64,
    pub cohort: CohortConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    /// Candidate-list sizes built and evaluated for recommendation.
    pub ks: Vec<usize>,
    /// Tasks trained and evaluated.
    pub tasks: Vec<TaskKind>,
    /// Fraction of students held out for evaluation.
    pub test_fraction: f64,
    pub vocab_cap: usize,
    /// Evaluate at most this many test histories (all when absent).
    pub eval_limit: Option<usize>,
    /// Generation budget for time-cost and answer prediction.
    pub max_new_tokens: usize,
    /// Save a resumable checkpoint every this many steps (0: only at the end).
    pub checkpoint_every: usize,
    /// Compression-token counts for `sweep`.
    pub sweep_m: Vec<usize>,
    /// Rank recommendation candidates by free generation instead of likelihood.
    pub recommend_by_generation: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            cohort: CohortConfig {
                n_students: 240,
                n_concepts: 24,
                n_questions: 480,
                interactions_per_student: CountRange { min: 60, max: 80 },
                window: 8,
                ..CohortConfig::default()
            },
            model: ModelConfig {
                max_history: 8,
                max_text_tokens: 160,
                ..ModelConfig::default()
            },
            train: TrainConfig {
                steps: 1_500,
                batch_histories: 8,
                lr: 1e-3,
                warmup_steps: 50,
                recommend_ks: vec![5],
                task_weights: [(TaskKind::Trace, 4.0), (TaskKind::TimeCost, 4.0)].into(),
                ..TrainConfig::default()
            },
            ks: vec![5, 10],
            tasks: TaskKind::ALL.to_vec(),
            test_fraction: 0.2,
            vocab_cap: 1_024,
            eval_limit: None,
            max_new_tokens: 24,
            checkpoint_every: 250,
            sweep_m: vec![1, 2, 3],
            recommend_by_generation: false,
        }
    }
}

impl RunConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let cfg: Self = serde_json::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg.resolved())
    }

    /// Propagates the master seed into every sub-config.
    pub fn resolved(mut self) -> Self {
        self.cohort.seed = self.seed;
        self.train.seed = self.seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        self.cohort.validate()?;
        self.train.validate()?;
        if self.ks.is_empty() || self.ks.iter().any(|k| !CANDIDATE_SIZES.contains(k)) {
            return Err(Error::Config(format!("ks must be a non-empty subset of {CANDIDATE_SIZES:?}")));
        }
        if let Some(k) = self.train.recommend_ks.iter().find(|k| !CANDIDATE_SIZES.contains(k)) {
            return Err(Error::Config(format!("train.recommend_ks contains K = {k}")));
        }
        if let Some(&k) = self.all_ks().iter().find(|&&k| k > self.cohort.n_concepts) {
            return Err(Error::Config(format!(
                "K = {k} exceeds the {} concepts of the cohort",
                self.cohort.n_concepts
            )));
        }
        if self.tasks.is_empty() {
            return Err(Error::Config("no tasks selected".into()));
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return Err(Error::Config("test_fraction must lie in (0, 1)".into()));
        }
        if self.sweep_m.is_empty() || self.sweep_m.contains(&0) {
            return Err(Error::Config("sweep_m must hold positive values".into()));
        }
        if self.model.max_history < self.cohort.window {
            return Err(Error::Config(format!(
                "model.max_history {} below cohort.window {}",
                self.model.max_history, self.cohort.window
            )));
        }
        Ok(())
    }

    /// Recommendation sizes that need task files: evaluation plus training.
    fn all_ks(&self) -> Vec<usize> {
        let mut ks: Vec<usize> = self.ks.iter().chain(&self.train.recommend_ks).copied().collect();
        ks.sort_unstable();
        ks.dedup();
        ks
    }
}

pub struct Layout {
    pub root: PathBuf,
}

impl Layout {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }
    pub fn dataset(&self) -> PathBuf {
        self.root.join("data/cohort.jsonl")
    }
    pub fn truth(&self) -> PathBuf {
        truth_path(self.dataset())
    }
    pub fn histories(&self) -> PathBuf {
        self.root.join("tasks/histories.jsonl")
    }
    pub fn train_tasks(&self) -> PathBuf {
        self.root.join("tasks/train")
    }
    pub fn test_tasks(&self) -> PathBuf {
        self.root.join("tasks/test")
    }
    pub fn model_dir(&self) -> PathBuf {
        self.root.join("model")
    }
    pub fn eval_dir(&self) -> PathBuf {
        self.root.join("eval")
    }
    pub fn sweep_dir(&self) -> PathBuf {
        self.root.join("sweep")
    }
    pub fn manifest(&self, command: &str) -> PathBuf {
        self.root.join("manifests").join(format!("{command}.json"))
    }
}

fn mkdir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).map_err(|e| Error::io(p, e))
}

fn write(p: &Path, text: &str) -> Result<()> {
    if let Some(parent) = p.parent() {
        mkdir(parent)?;
    }
    fs::write(p, text).map_err(|e| Error::io(p, e))
}

#[derive(Serialize)]
struct Manifest<'a> {
    command: &'a str,
    seed: u64,
    config: &'a RunConfig,
}

pub fn write_manifest(layout: &Layout, command: &str, cfg: &RunConfig) -> Result<()> {
    let m = Manifest {
        command,
        seed: cfg.seed,
        config: cfg,
    };
    write(&layout.manifest(command), &(serde_json::to_string_pretty(&m)? + "\n"))
}

/// Generates the cohort, its truth file and the statistics table.
pub fn cmd_simulate(cfg: &RunConfig, layout: &Layout) -> Result<StatsReport> {
    cfg.validate()?;
    let (seqs, truth) = generate_cohort(&cfg.cohort)?;
    mkdir(&layout.root.join("data"))?;
    save_dataset(&seqs, layout.dataset())?;
    truth.save(layout.truth())?;
    let stats = cohort_stats(&seqs);
    write(&layout.root.join("data/stats.txt"), &stats.render())?;
    write_manifest(layout, "simulate", cfg)?;
    Ok(stats)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BuildSummary {
    /// Instances per task file, train side.
    pub train: BTreeMap<String, usize>,
    pub test: BTreeMap<String, usize>,
    pub leakage: LeakageReport,
}

fn counts(set: &TaskSet) -> BTreeMap<String, usize> {
    set.files().into_iter().map(|(n, t)| (n, t.len())).collect()
}

/// Splits students into train and test, builds every task for both sides
/// and scans all task files for history/target overlap.
pub fn cmd_build_tasks(cfg: &RunConfig, layout: &Layout) -> Result<BuildSummary> {
    cfg.validate()?;
    let seqs = load_dataset(layout.dataset())?;
    let truth = GroundTruth::load(layout.truth())?;
    let (train_seqs, test_seqs) = split_students(&seqs, cfg.test_fraction, cfg.seed);
    let ks = cfg.all_ks();
    let (mut histories, train) = build_all(&train_seqs, &truth, &ks, cfg.seed)?;
    let (test_hist, test) = build_all(&test_seqs, &truth, &ks, cfg.seed)?;
    histories.extend(test_hist);
    let leakage = scan_leakage(&seqs, &histories, train.all().chain(test.all()));
    if !leakage.clean() {
        return Err(Error::Leakage(format!(
            "{} violations, {} unresolved references",
            leakage.violations, leakage.unresolved
        )));
    }
    for dir in [layout.train_tasks(), layout.test_tasks()] {
        mkdir(&dir)?;
    }
    save_dataset(&histories, layout.histories())?;
    train.save(layout.train_tasks())?;
    test.save(layout.test_tasks())?;
    write(
        &layout.root.join("tasks/leakage.json"),
        &(serde_json::to_string_pretty(&leakage)? + "\n"),
    )?;
    write_manifest(layout, "build-tasks", cfg)?;
    Ok(BuildSummary {
        train: counts(&train),
        test: counts(&test),
        leakage,
    })
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    /// Continue from `model.ckpt` when it holds optimizer state.
    pub resume: bool,
    /// Stop (after checkpointing) once this many steps are done.
    pub stop_after: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub steps_done: usize,
    pub first_loss: Option<f64>,
    pub last_loss: Option<f64>,
    pub vocab_size: usize,
    pub parameters: usize,
}

fn training_tasks(cfg: &RunConfig, layout: &Layout) -> Result<TaskSet> {
    let mut set = TaskSet::load(layout.train_tasks(), &cfg.train.recommend_ks)?;
    set.recommend.retain(|k, _| cfg.train.recommend_ks.contains(k));
    let keep = |k: TaskKind| cfg.tasks.contains(&k);
    if !keep(TaskKind::Trace) {
        set.trace.clear();
    }
    if !keep(TaskKind::TimeCost) {
        set.timecost.clear();
    }
    if !keep(TaskKind::AnswerPredict) {
        set.answer.clear();
    }
    if !keep(TaskKind::Recommend) {
        set.recommend.clear();
    }
    if set.is_empty() {
        return Err(Error::Invalid(format!(
            "{}: no training tasks (run build-tasks first)",
            layout.train_tasks().display()
        )));
    }
    Ok(set)
}

/// Vocabulary from the training side only: rendered histories plus task text.
pub fn fit_tokenizer(histories: &[InteractionSequence], tasks: &TaskSet, cap: usize) -> Result<Tokenizer> {
    let texts: Vec<String> = histories
        .iter()
        .flat_map(|h| h.interactions.iter().map(Interaction::render))
        .chain(tasks.all().flat_map(|t| [t.instruction_text.clone(), t.target_text.clone()]))
        .collect();
    Tokenizer::fit(texts.iter().map(String::as_str), cap)
}

fn loss_line(l: &StepLog) -> String {
    format!("{},{:.6},{:.6e},{:.6}\n", l.step, l.loss, l.lr, l.grad_norm)
}

/// Rewrites `loss.csv` keeping its first `keep` data rows.
fn truncate_loss_log(path: &Path, keep: usize) -> Result<()> {
    let text = fs::read_to_string(path).unwrap_or_default();
    let mut lines: Vec<&str> = text.lines().collect();
    lines.truncate(keep + 1);
    let mut out = String::from("step,loss,lr,grad_norm\n");
    for l in lines.iter().skip(1) {
        out.push_str(l);
        out.push('\n');
    }
    write(path, &out)
}

/// Trains a model into `model_dir` from the train-side task files.
pub fn train_into(cfg: &RunConfig, layout: &Layout, model_dir: &Path, opts: TrainOptions, mut on_step: impl FnMut(&StepLog)) -> Result<TrainSummary> {
    cfg.validate()?;
    mkdir(model_dir)?;
    let ckpt = model_dir.join("model.ckpt");
    let log_path = model_dir.join("loss.csv");
    let histories = load_dataset(layout.histories())?;
    let tasks = training_tasks(cfg, layout)?;
    let train_keys: std::collections::HashSet<_> = tasks.all().map(|t| t.history_ref.clone()).collect();
    let train_hist: Vec<InteractionSequence> = histories
        .iter()
        .filter(|h| train_keys.contains(&crate::tasks::HistoryRef::of(h)))
        .cloned()
        .collect();

    let resumed = if opts.resume && ckpt.exists() {
        let (model, opt) = UniModel::load(&ckpt)?;
        let opt = opt.ok_or_else(|| Error::Invalid(format!("{}: no optimizer state to resume", ckpt.display())))?;
        let expected = ModelConfig {
            vocab_size: model.config.vocab_size,
            ..cfg.model.clone()
        };
        if model.config != expected {
            return Err(Error::Config(format!("{}: model config differs from the run config", ckpt.display())));
        }
        Some((model, opt))
    } else {
        None
    };
    let mut trainer = match resumed {
        Some((model, opt)) => {
            let data = prepare(&model, &train_hist, tasks.all())?;
            truncate_loss_log(&log_path, opt.step)?;
            Trainer::resume(model, opt, cfg.train.clone(), data)?
        }
        None => {
            let tok = fit_tokenizer(&train_hist, &tasks, cfg.vocab_cap)?;
            let mc = ModelConfig {
                vocab_size: tok.vocab_size(),
                ..cfg.model.clone()
            };
            mc.validate()?;
            let model = UniModel::new(mc, tok, cfg.seed)?;
            let data = prepare(&model, &train_hist, tasks.all())?;
            write(&log_path, "step,loss,lr,grad_norm\n")?;
            Trainer::new(model, cfg.train.clone(), data)?
        }
    };

    let mut log = fs::OpenOptions::new()
        .append(true)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let mut first = None;
    let mut last = None;
    let stop = opts.stop_after.unwrap_or(cfg.train.steps).min(cfg.train.steps);
    while trainer.steps_done() < stop {
        let l = trainer.step()?;
        log.write_all(loss_line(&l).as_bytes()).map_err(|e| Error::io(&log_path, e))?;
        first.get_or_insert(l.loss);
        last = Some(l.loss);
        on_step(&l);
        let done = trainer.steps_done();
        if cfg.checkpoint_every > 0 && done % cfg.checkpoint_every == 0 && done < stop {
            trainer.model.save(&ckpt, Some(&trainer.optimizer))?;
        }
    }
    trainer.model.save(&ckpt, Some(&trainer.optimizer))?;
    Ok(TrainSummary {
        steps_done: trainer.steps_done(),
        first_loss: first,
        last_loss: last,
        vocab_size: trainer.model.config.vocab_size,
        parameters: trainer.model.params.numel(),
    })
}

pub fn cmd_train(cfg: &RunConfig, layout: &Layout, opts: TrainOptions, on_step: impl FnMut(&StepLog)) -> Result<TrainSummary> {
    let s = train_into(cfg, layout, &layout.model_dir(), opts, on_step)?;
    write_manifest(layout, "train", cfg)?;
    Ok(s)
}

/// Evaluates `model` on the test-side tasks selected by `cfg`.
pub fn evaluate(cfg: &RunConfig, layout: &Layout, model: &UniModel) -> Result<EvalReport> {
    let histories = load_dataset(layout.histories())?;
    let index = index_histories(&histories);
    let test = TaskSet::load(layout.test_tasks(), &cfg.ks)?;
    let train = TaskSet::load(layout.train_tasks(), &[])?;

    // histories evaluated, in file order
    let mut order: Vec<crate::tasks::HistoryRef> = Vec::new();
    let mut seen = std::collections::HashSet::new();
    for t in test.all() {
        if seen.insert(t.history_ref.clone()) {
            order.push(t.history_ref.clone());
        }
    }
    if let Some(n) = cfg.eval_limit {
        order.truncate(n);
    }
    let keep: std::collections::HashSet<_> = order.iter().cloned().collect();
    let mut profiles = HashMap::new();
    for r in &order {
        let h = index
            .get(r)
            .ok_or_else(|| Error::Invalid(format!("test task references unknown history {}#{}", r.student_id, r.segment_index)))?;
        profiles.insert(r.clone(), model.encode_profile(h)?);
    }
    let selected = |list: &[TaskInstance]| -> Vec<TaskInstance> { list.iter().filter(|t| keep.contains(&t.history_ref)).cloned().collect() };

    let mut report = EvalReport::default();
    if cfg.tasks.contains(&TaskKind::Trace) {
        let items = selected(&test.trace);
        if !items.is_empty() {
            let mut preds = Vec::new();
            for t in &items {
                preds.push(model.classify_trace_from_profile(&profiles[&t.history_ref], t)?);
            }
            let golds: Vec<String> = items.iter().map(|t| t.target_text.clone()).collect();
            report.trace = Some(TraceScore {
                accuracy: accuracy(&preds, &golds)?,
                majority_baseline: majority_baseline(&golds)?,
                n: items.len(),
            });
        }
    }
    if cfg.tasks.contains(&TaskKind::TimeCost) {
        let items = selected(&test.timecost);
        if !items.is_empty() {
            let train_times: Vec<i64> = train.timecost.iter().filter_map(|t| t.target_text.parse().ok()).collect();
            let med = median(&train_times)?;
            let mut preds = Vec::new();
            for t in &items {
                preds.push(model.generate_from_profile(&profiles[&t.history_ref], t, cfg.max_new_tokens)?);
            }
            let golds: Vec<i64> = items
                .iter()
                .map(|t| {
                    t.target_text
                        .parse()
                        .map_err(|_| Error::Invalid(format!("time-cost target {:?} is not an integer", t.target_text)))
                })
                .collect::<Result<_>>()?;
            let (m, substituted) = time_mae(&preds, &golds, med)?;
            report.timecost = Some(TimeScore {
                mae: m,
                median_baseline_mae: mae(&vec![med; golds.len()], &golds)?,
                median_s: med,
                substituted,
                n: items.len(),
            });
        }
    }
    if cfg.tasks.contains(&TaskKind::AnswerPredict) {
        let items = selected(&test.answer);
        if !items.is_empty() {
            let mut preds = Vec::new();
            for t in &items {
                preds.push(model.generate_from_profile(&profiles[&t.history_ref], t, cfg.max_new_tokens)?);
            }
            let golds: Vec<String> = items.iter().map(|t| t.target_text.clone()).collect();
            report.answer = Some(AnswerScore {
                exact_match: exact_match(&preds, &golds)?,
                n: items.len(),
            });
        }
    }
    if cfg.tasks.contains(&TaskKind::Recommend) {
        for (&k, list) in &test.recommend {
            let items = selected(list);
            if items.is_empty() {
                continue;
            }
            let mut rankings = Vec::new();
            for t in &items {
                let profile = &profiles[&t.history_ref];
                let mut ranked: Vec<String> = model
                    .score_candidates_from_profile(profile, t)?
                    .into_iter()
                    .map(|(c, _)| c)
                    .collect();
                if cfg.recommend_by_generation {
                    let top = model.recommend_by_generation(profile, t)?;
                    ranked.retain(|c| *c != top);
                    ranked.insert(0, top);
                }
                rankings.push((ranked, t.target_text.clone()));
            }
            report.recommend.insert(
                k,
                RecommendScore {
                    precision_at_1: precision_at_1(&rankings)?,
                    chance: 1.0 / k as f64,
                    n: items.len(),
                },
            );
        }
    }
    report.validate()?;
    Ok(report)
}

fn write_report(dir: &Path, report: &EvalReport) -> Result<()> {
    write(&dir.join("report.json"), &report.to_json()?)?;
    write(&dir.join("report.txt"), &report.render())
}

pub fn cmd_eval(cfg: &RunConfig, layout: &Layout) -> Result<EvalReport> {
    cfg.validate()?;
    let (model, _) = UniModel::load(layout.model_dir().join("model.ckpt"))?;
    let report = evaluate(cfg, layout, &model)?;
    write_report(&layout.eval_dir(), &report)?;
    write_manifest(layout, "eval", cfg)?;
    Ok(report)
}

#[derive(Debug, Clone)]
pub struct VramOutput {
    pub text: String,
    /// False when a golden cell failed.
    pub passed: bool,
}

/// Cost-model table for the reference models or a shape file. With
/// `golden`, also checks the published grid cell by cell.
pub fn cmd_vram(shapes: Option<&Path>, golden: bool, csv: bool) -> Result<VramOutput> {
    let rows: Vec<(vram::Stage, String, vram::VramEstimate)> = match shapes {
        Some(p) => vram::load_shape_file(p)?
            .into_iter()
            .map(|m| Ok((m.shapes[0].stage, m.name.clone(), vram::estimate_total(&m.shapes)?)))
            .collect::<Result<_>>()?,
        None => vram::reference_models()
            .into_iter()
            .map(|(stage, m)| Ok((stage, m.name.clone(), vram::estimate_total(&m.shapes)?)))
            .collect::<Result<_>>()?,
    };
    let mut text = if csv { vram::render_csv(&rows) } else { vram::render_table(&rows) };
    let mut passed = true;
    if golden {
        let report = vram::golden_report();
        text.push('\n');
        text.push_str(&report.render());
        passed = report.passed();
    }
    Ok(VramOutput { text, passed })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub m: usize,
    /// Mean decoder input length `n·m + |prompt|` over evaluated instances.
    pub mean_lm_input: f64,
    /// Block activations of the compressed reference model at `s = 300·m`.
    pub blocks_bytes: u128,
    pub final_loss: Option<f64>,
    pub report: EvalReport,
}

/// Trains and evaluates one model per compression-token count.
pub fn cmd_sweep(cfg: &RunConfig, layout: &Layout, mut on_step: impl FnMut(usize, &StepLog)) -> Result<Vec<SweepRow>> {
    cfg.validate()?;
    let histories = load_dataset(layout.histories())?;
    let index = index_histories(&histories);
    let test = TaskSet::load(layout.test_tasks(), &cfg.ks)?;
    let base = compressed_reference();
    let mut rows = Vec::new();
    for &m in &cfg.sweep_m {
        let run = RunConfig {
            model: ModelConfig { m, ..cfg.model.clone() },
            ..cfg.clone()
        };
        let dir = layout.sweep_dir().join(format!("m{m}"));
        let summary = train_into(&run, layout, &dir, TrainOptions::default(), |l| on_step(m, l))?;
        let (model, _) = UniModel::load(dir.join("model.ckpt"))?;
        let report = evaluate(&run, layout, &model)?;
        write_report(&dir, &report)?;
        let lens: Vec<usize> = test
            .all()
            .filter_map(|t| index.get(&t.history_ref).map(|h| h.len() * m + prompt_ids(&model.tokenizer, &t.instruction_text).len()))
            .collect();
        let shapes: Vec<ModelShape> = base
            .iter()
            .map(|s| ModelShape {
                s: s.s * m as u64,
                ..*s
            })
            .collect();
        let blocks = vram::estimate_total(&shapes)?.blocks_bytes;
        rows.push(SweepRow {
            m,
            mean_lm_input: lens.iter().sum::<usize>() as f64 / lens.len().max(1) as f64,
            blocks_bytes: blocks,
            final_loss: summary.last_loss,
            report,
        });
    }
    write(
        &layout.sweep_dir().join("report.json"),
        &(serde_json::to_string_pretty(&rows)? + "\n"),
    )?;
    write(&layout.sweep_dir().join("report.txt"), &render_sweep(&rows))?;
    write_manifest(layout, "sweep", cfg)?;
    Ok(rows)
}

fn compressed_reference() -> Vec<ModelShape> {
    vram::reference_models()
        .into_iter()
        .find(|(stage, m)| *stage == vram::Stage::Train && m.shapes.len() > 1)
        .map(|(_, m)| m.shapes)
        .expect("reference set includes the compressed model")
}

pub fn render_sweep(rows: &[SweepRow]) -> String {
    let mut out = String::from("m  lm_input  blocks        trace_acc  timecost_mae  answer_em  p@1\n");
    for r in rows {
        let p1: Vec<String> = r
            .report
            .recommend
            .iter()
            .map(|(k, s)| format!("K{k}={:.3}", s.precision_at_1))
            .collect();
        out.push_str(&format!(
            "{:<2} {:>9.1}  {:<12}  {:>9}  {:>12}  {:>9}  {}\n",
            r.m,
            r.mean_lm_input,
            vram::render_bytes(r.blocks_bytes),
            r.report.trace.as_ref().map_or("-".into(), |t| format!("{:.4}", t.accuracy)),
            r.report.timecost.as_ref().map_or("-".into(), |t| format!("{:.2}", t.mae)),
            r.report.answer.as_ref().map_or("-".into(), |t| format!("{:.4}", t.exact_match)),
            p1.join(" ")
        ));
    }
    out
}

/// Parses `trace`, `recommend`, ... or `all`.
pub fn parse_task_selection(s: &str) -> Result<Vec<TaskKind>> {
    if s == "all" {
        return Ok(TaskKind::ALL.to_vec());
    }
    s.split(',').map(|p| TaskKind::from_slug(p.trim())).collect()
}

/// Parses a comma-separated list of positive integers.
pub fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|p| {
            p.trim()
                .parse::<usize>()
                .ok()
                .filter(|&v| v > 0)
                .ok_or_else(|| Error::Config(format!("{p:?} is not a positive integer")))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> RunConfig {
        RunConfig {
            cohort: CohortConfig {
                n_students: 12,
                n_concepts: 12,
                n_questions: 60,
                interactions_per_student: CountRange { min: 12, max: 16 },
                window: 6,
                ..CohortConfig::default()
            },
            model: ModelConfig {
                encoder_hidden: 16,
                lm_hidden: 16,
                max_history: 6,
                ..RunConfig::default().model
            },
            train: TrainConfig {
                steps: 6,
                batch_histories: 2,
                warmup_steps: 1,
                ..RunConfig::default().train
            },
            checkpoint_every: 2,
            eval_limit: Some(4),
            sweep_m: vec![1, 2],
            ..RunConfig::default()
        }
        .resolved()
    }

    #[test]
    fn config_round_trip_and_validation() {
        let cfg = small();
        let text = serde_json::to_string(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&text).unwrap();
        assert_eq!(back, cfg);
        cfg.validate().unwrap();
        assert!(RunConfig { ks: vec![7], ..cfg.clone() }.validate().is_err());
        assert!(RunConfig { ks: vec![25], ..cfg.clone() }.validate().is_err());
        assert!(RunConfig { test_fraction: 1.0, ..cfg.clone() }.validate().is_err());
        assert!(serde_json::from_str::<RunConfig>(r#"{"bogus": 1}"#).is_err());
        assert_eq!(parse_list("1,2, 3").unwrap(), vec![1, 2, 3]);
        assert!(parse_list("1,x").is_err());
        assert_eq!(parse_task_selection("all").unwrap().len(), 4);
        assert_eq!(parse_task_selection("trace,answer").unwrap(), vec![TaskKind::Trace, TaskKind::AnswerPredict]);
    }

    #[test]
    fn simulate_build_train_eval() {
        let dir = tempfile::tempdir().unwrap();
        let layout = Layout::new(dir.path());
        let cfg = small();
        let stats = cmd_simulate(&cfg, &layout).unwrap();
        assert_eq!(stats.rows().len(), 4);
        assert!(!load_dataset(layout.dataset()).unwrap().is_empty());
        assert_eq!(stats.students, cfg.cohort.n_students);
        let summary = cmd_build_tasks(&cfg, &layout).unwrap();
        assert!(summary.leakage.clean());
        let per = |m: &BTreeMap<String, usize>| m["trace.jsonl"];
        for side in [&summary.train, &summary.test] {
            assert!(side.values().all(|&n| n == per(side)));
        }
        assert!(summary.test.contains_key("recommend_k10.jsonl"));

        let t = cmd_train(&cfg, &layout, TrainOptions::default(), |_| {}).unwrap();
        assert_eq!(t.steps_done, 6);
        let log = fs::read_to_string(layout.model_dir().join("loss.csv")).unwrap();
        assert_eq!(log.lines().count(), 7);

        // interrupted then resumed matches the straight run
        let resumed = tempfile::tempdir().unwrap();
        let l2 = Layout::new(resumed.path());
        cmd_simulate(&cfg, &l2).unwrap();
        cmd_build_tasks(&cfg, &l2).unwrap();
        let opts = TrainOptions {
            resume: false,
            stop_after: Some(3),
        };
        assert_eq!(cmd_train(&cfg, &l2, opts, |_| {}).unwrap().steps_done, 3);
        let opts = TrainOptions {
            resume: true,
            stop_after: None,
        };
        cmd_train(&cfg, &l2, opts, |_| {}).unwrap();
        for f in ["model.ckpt", "loss.csv"] {
            assert_eq!(
                fs::read(layout.model_dir().join(f)).unwrap(),
                fs::read(l2.model_dir().join(f)).unwrap(),
                "{f}"
            );
        }

        let report = cmd_eval(&cfg, &layout).unwrap();
        assert_eq!(report.trace.as_ref().unwrap().n, 4);
        assert_eq!(report.recommend.keys().copied().collect::<Vec<_>>(), vec![5, 10]);
        let text = fs::read_to_string(layout.eval_dir().join("report.json")).unwrap();
        assert_eq!(EvalReport::from_json(&text).unwrap(), report);
        assert!(layout.manifest("eval").exists());
    }

    #[test]
    fn vram_golden_passes() {
        let out = cmd_vram(None, true, false).unwrap();
        assert!(out.passed);
        assert!(out.text.contains("Compressed-5B"));
    }
}
