//! Supervised task instances built from interaction histories.
//!
//! A sequence is split into a history (every interaction but the last) and
//! a target (the last interaction). All four tasks built from one sequence
//! share that history and differ only in instruction and target text.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use serde::{Deserialize, Serialize};

use crate::cohort::GroundTruth;
use crate::interaction::{
    format_answer_list, read_jsonl, split_image_placeholder, write_jsonl, Interaction, InteractionSequence,
    IMAGE_PLACEHOLDER,
};
use crate::seed::stream;
use crate::{Error, Result};

pub const CANDIDATE_SIZES: [usize; 4] = [5, 10, 25, 50];
pub const TRUE_TEXT: &str = "[True]";
pub const FALSE_TEXT: &str = "[False]";

pub const RECOMMEND_HEAD: &str = "Based on the user's past problem-solving history, select 1 knowledge concept from the following list that the user is likely to make mistakes on.";
pub const TRACE_HEAD: &str =
    "Based on the user's past problem-solving history, determine whether the following question can be answered correctly.";
pub const TIMECOST_HEAD: &str = "Based on the user's past problem-solving history, estimate how long the user will take to answer the following question (in seconds).";
pub const ANSWER_HEAD: &str =
    "Based on the user's past problem-solving history, predict the answer the user is likely to give for the following question.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TaskKind {
    Recommend,
    Trace,
    TimeCost,
    AnswerPredict,
}

impl TaskKind {
    pub const ALL: [TaskKind; 4] = [Self::Recommend, Self::Trace, Self::TimeCost, Self::AnswerPredict];

    /// Short name used for file names and the `--task` flag.
    pub fn slug(self) -> &'static str {
        match self {
            Self::Recommend => "recommend",
            Self::Trace => "trace",
            Self::TimeCost => "timecost",
            Self::AnswerPredict => "answer",
        }
    }

    pub fn from_slug(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.slug() == s)
            .ok_or_else(|| Error::Config(format!("unknown task `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct HistoryRef {
    pub student_id: String,
    pub segment_index: usize,
}

impl HistoryRef {
    pub fn of(seq: &InteractionSequence) -> Self {
        Self {
            student_id: seq.student_id.clone(),
            segment_index: seq.segment_index,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskInstance {
    pub kind: TaskKind,
    pub history_ref: HistoryRef,
    pub instruction_text: String,
    pub candidates: Option<Vec<String>>,
    pub target_text: String,
}

impl TaskInstance {
    /// Kind-specific invariants.
    pub fn validate(&self) -> Result<()> {
        let fail = |field: &'static str, message: String| Error::Validation {
            record: format!("{}#{}", self.history_ref.student_id, self.history_ref.segment_index),
            field,
            message,
        };
        match self.kind {
            TaskKind::Recommend => {
                let c = self
                    .candidates
                    .as_ref()
                    .ok_or_else(|| fail("candidates", "missing for Recommend".into()))?;
                if !CANDIDATE_SIZES.contains(&c.len()) {
                    return Err(fail("candidates", format!("size {} not in {CANDIDATE_SIZES:?}", c.len())));
                }
                let mut sorted = c.clone();
                sorted.sort();
                sorted.dedup();
                if sorted.len() != c.len() {
                    return Err(fail("candidates", "duplicate candidates".into()));
                }
                if !c.contains(&self.target_text) {
                    return Err(fail("target_text", "ground truth missing from candidates".into()));
                }
            }
            TaskKind::Trace => {
                if self.target_text != TRUE_TEXT && self.target_text != FALSE_TEXT {
                    return Err(fail("target_text", format!("`{}` is not [True]/[False]", self.target_text)));
                }
            }
            TaskKind::TimeCost => {
                if self.target_text.parse::<u64>().is_err() {
                    return Err(fail("target_text", format!("`{}` is not a non-negative integer", self.target_text)));
                }
            }
            TaskKind::AnswerPredict => {
                if serde_json::from_str::<Vec<String>>(&self.target_text).is_err() {
                    return Err(fail("target_text", "not a JSON string list".into()));
                }
            }
        }
        if self.kind != TaskKind::Recommend && self.candidates.is_some() {
            return Err(fail("candidates", "only Recommend carries candidates".into()));
        }
        Ok(())
    }
}

/// History (all but the last interaction) and next-step target.
/// Sequences shorter than two interactions yield nothing.
pub fn split_history(seq: &InteractionSequence) -> Option<(InteractionSequence, Interaction)> {
    let (target, head) = seq.interactions.split_last()?;
    if head.is_empty() {
        return None;
    }
    Some((
        InteractionSequence {
            student_id: seq.student_id.clone(),
            segment_index: seq.segment_index,
            interactions: head.to_vec(),
        },
        target.clone(),
    ))
}

/// `Question:`/`Knowledge Concept:` lines plus `Image: <image>` when present.
pub fn question_block(target: &Interaction) -> String {
    let (prose, has_image) = split_image_placeholder(&target.question_text);
    let mut s = format!("Question: {prose}\nKnowledge Concept: {}", target.knowledge_concept);
    if has_image {
        s.push_str("\nImage: ");
        s.push_str(IMAGE_PLACEHOLDER);
    }
    s
}

fn check_leakage(seq: &InteractionSequence, target: &Interaction) -> Result<()> {
    if seq.interactions.iter().any(|x| x == target) {
        return Err(Error::Leakage(format!("target interaction appears in history {}", seq.key())));
    }
    Ok(())
}

fn with_target(seq: &InteractionSequence, target: &Interaction, kind: TaskKind, head: &str, target_text: String) -> Result<TaskInstance> {
    check_leakage(seq, target)?;
    Ok(TaskInstance {
        kind,
        history_ref: HistoryRef::of(seq),
        instruction_text: format!("{head}\n{}", question_block(target)),
        candidates: None,
        target_text,
    })
}

pub fn build_trace(seq: &InteractionSequence, target: &Interaction) -> Result<TaskInstance> {
    let t = if target.correct { TRUE_TEXT } else { FALSE_TEXT };
    with_target(seq, target, TaskKind::Trace, TRACE_HEAD, t.to_string())
}

pub fn build_timecost(seq: &InteractionSequence, target: &Interaction) -> Result<TaskInstance> {
    with_target(seq, target, TaskKind::TimeCost, TIMECOST_HEAD, target.response_time_s.to_string())
}

pub fn build_answerpredict(seq: &InteractionSequence, target: &Interaction) -> Result<TaskInstance> {
    with_target(
        seq,
        target,
        TaskKind::AnswerPredict,
        ANSWER_HEAD,
        format_answer_list(&target.user_answer),
    )
}

pub fn recommend_instruction(candidates: &[String]) -> String {
    format!("{RECOMMEND_HEAD}\n\nCandidate Knowledge Concepts:\n{}", candidates.join(", "))
}

/// Ground-truth weak concept plus `k - 1` distinct distractors drawn from
/// the rest of the inventory, in seeded shuffled order.
pub fn build_recommend(seq: &InteractionSequence, truth: &GroundTruth, k: usize, seed: u64) -> Result<TaskInstance> {
    if !CANDIDATE_SIZES.contains(&k) {
        return Err(Error::Config(format!("K = {k} not in {CANDIDATE_SIZES:?}")));
    }
    let y = truth
        .weakest(&seq.student_id)
        .ok_or_else(|| Error::Invalid(format!("no ground truth for student {}", seq.student_id)))?
        .to_string();
    let others: Vec<String> = truth.concept_inventory().into_iter().filter(|c| *c != y).collect();
    if others.len() + 1 < k {
        return Err(Error::Config(format!(
            "concept inventory of {} is smaller than K = {k}",
            others.len() + 1
        )));
    }
    let mut rng = stream(seed, &format!("recommend/{}/{}/{k}", seq.student_id, seq.segment_index));
    let mut candidates: Vec<String> = index::sample(&mut rng, others.len(), k - 1)
        .into_iter()
        .map(|i| others[i].clone())
        .collect();
    candidates.push(y.clone());
    candidates.shuffle(&mut rng);
    Ok(TaskInstance {
        kind: TaskKind::Recommend,
        history_ref: HistoryRef::of(seq),
        instruction_text: recommend_instruction(&candidates),
        candidates: Some(candidates),
        target_text: y,
    })
}

/// Every task built from one dataset split.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct TaskSet {
    pub trace: Vec<TaskInstance>,
    pub timecost: Vec<TaskInstance>,
    pub answer: Vec<TaskInstance>,
    /// Keyed by K.
    pub recommend: BTreeMap<usize, Vec<TaskInstance>>,
}

impl TaskSet {
    pub fn all(&self) -> impl Iterator<Item = &TaskInstance> {
        self.trace
            .iter()
            .chain(&self.timecost)
            .chain(&self.answer)
            .chain(self.recommend.values().flatten())
    }

    pub fn len(&self) -> usize {
        self.all().count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// File name for each task list: `trace.jsonl`, `recommend_k5.jsonl`, ...
    pub fn files(&self) -> Vec<(String, &[TaskInstance])> {
        let mut out = vec![
            ("trace.jsonl".to_string(), self.trace.as_slice()),
            ("timecost.jsonl".to_string(), self.timecost.as_slice()),
            ("answer.jsonl".to_string(), self.answer.as_slice()),
        ];
        for (k, v) in &self.recommend {
            out.push((format!("recommend_k{k}.jsonl"), v.as_slice()));
        }
        out
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        for (name, tasks) in self.files() {
            save_tasks(dir.as_ref().join(name), tasks)?;
        }
        Ok(())
    }

    /// Reads the files written by [`TaskSet::save`]; absent files are empty.
    pub fn load(dir: impl AsRef<Path>, ks: &[usize]) -> Result<Self> {
        let dir = dir.as_ref();
        let read = |name: &str| -> Result<Vec<TaskInstance>> {
            let p = dir.join(name);
            if p.exists() {
                load_tasks(p)
            } else {
                Ok(Vec::new())
            }
        };
        let mut recommend = BTreeMap::new();
        for &k in ks {
            let v = read(&format!("recommend_k{k}.jsonl"))?;
            if !v.is_empty() {
                recommend.insert(k, v);
            }
        }
        Ok(Self {
            trace: read("trace.jsonl")?,
            timecost: read("timecost.jsonl")?,
            answer: read("answer.jsonl")?,
            recommend,
        })
    }
}

/// Splits every sequence into history and target and builds all tasks.
/// Returns the truncated histories alongside the tasks that reference them.
pub fn build_all(
    sequences: &[InteractionSequence],
    truth: &GroundTruth,
    ks: &[usize],
    seed: u64,
) -> Result<(Vec<InteractionSequence>, TaskSet)> {
    let mut histories = Vec::new();
    let mut set = TaskSet::default();
    for &k in ks {
        set.recommend.insert(k, Vec::new());
    }
    for seq in sequences {
        let Some((history, target)) = split_history(seq) else {
            continue;
        };
        set.trace.push(build_trace(&history, &target)?);
        set.timecost.push(build_timecost(&history, &target)?);
        set.answer.push(build_answerpredict(&history, &target)?);
        for &k in ks {
            let r = build_recommend(&history, truth, k, seed)?;
            set.recommend.get_mut(&k).expect("inserted above").push(r);
        }
        histories.push(history);
    }
    Ok((histories, set))
}

pub fn save_tasks(path: impl AsRef<Path>, tasks: &[TaskInstance]) -> Result<()> {
    write_jsonl(path.as_ref(), tasks)
}

pub fn load_tasks(path: impl AsRef<Path>) -> Result<Vec<TaskInstance>> {
    read_jsonl(path.as_ref(), TaskInstance::validate)
}

/// Lookup of histories by reference.
pub fn index_histories(histories: &[InteractionSequence]) -> HashMap<HistoryRef, &InteractionSequence> {
    histories.iter().map(|h| (HistoryRef::of(h), h)).collect()
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakageReport {
    pub instances_checked: usize,
    /// Instances whose target interaction also occurs in their history.
    pub violations: usize,
    /// Instances whose history reference resolves to nothing.
    pub unresolved: usize,
}

impl LeakageReport {
    pub fn clean(&self) -> bool {
        self.violations == 0 && self.unresolved == 0
    }
}

/// Exact-match scan: for every instance, reconstructs its target from the
/// source sequence and checks that it is absent from the stored history.
pub fn scan_leakage<'a>(
    source: &[InteractionSequence],
    histories: &[InteractionSequence],
    tasks: impl IntoIterator<Item = &'a TaskInstance>,
) -> LeakageReport {
    let src: HashMap<HistoryRef, &InteractionSequence> = index_histories(source);
    let hist = index_histories(histories);
    let mut report = LeakageReport::default();
    for t in tasks {
        report.instances_checked += 1;
        let (Some(s), Some(h)) = (src.get(&t.history_ref), hist.get(&t.history_ref)) else {
            report.unresolved += 1;
            continue;
        };
        let Some(target) = s.interactions.last() else {
            report.unresolved += 1;
            continue;
        };
        if h.interactions.iter().any(|x| x == target) {
            report.violations += 1;
        }
    }
    report
}

/// Deterministic student-level split: `test_fraction` of students (at
/// least one when there are two or more) go to the test side.
pub fn split_students(sequences: &[InteractionSequence], test_fraction: f64, seed: u64) -> (Vec<InteractionSequence>, Vec<InteractionSequence>) {
    let mut ids: Vec<&str> = sequences.iter().map(|s| s.student_id.as_str()).collect();
    ids.sort_unstable();
    ids.dedup();
    ids.shuffle(&mut stream(seed, "student-split"));
    let mut n_test = (ids.len() as f64 * test_fraction).round() as usize;
    if ids.len() >= 2 {
        n_test = n_test.clamp(1, ids.len() - 1);
    }
    let test: std::collections::HashSet<&str> = ids[..n_test].iter().copied().collect();
    sequences
        .iter()
        .cloned()
        .partition(|s| !test.contains(s.student_id.as_str()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cohort::{generate_cohort, CohortConfig, CountRange};
    use proptest::prelude::*;

    fn cohort(n_concepts: usize) -> (Vec<InteractionSequence>, GroundTruth) {
        generate_cohort(&CohortConfig {
            n_students: 6,
            n_concepts,
            n_questions: 120,
            interactions_per_student: CountRange { min: 20, max: 30 },
            window: 12,
            seed: 5,
            ..Default::default()
        })
        .unwrap()
    }

    fn interaction(t: i64, correct: bool, answer: &[&str]) -> Interaction {
        Interaction {
            question_text: format!("What is {t} minus 1?"),
            image_feature: None,
            user_answer: answer.iter().map(|s| s.to_string()).collect(),
            knowledge_concept: "Subtraction".into(),
            correct,
            response_time_s: t,
        }
    }

    fn seq_of(xs: Vec<Interaction>) -> InteractionSequence {
        InteractionSequence {
            student_id: "s00000".into(),
            segment_index: 0,
            interactions: xs,
        }
    }

    #[test]
    fn recommend_forced_composition() {
        let (seqs, truth) = cohort(5);
        let t = build_recommend(&seqs[0], &truth, 5, 1).unwrap();
        let mut got = t.candidates.clone().unwrap();
        got.sort();
        let mut inv = truth.concept_inventory();
        inv.sort();
        assert_eq!(got, inv);
        assert!(t.instruction_text.starts_with(
            "Based on the user's past problem-solving history, select 1 knowledge concept from the following list that the user is likely to make mistakes on."
        ));
        assert!(build_recommend(&seqs[0], &truth, 10, 1).is_err());
        assert!(build_recommend(&seqs[0], &truth, 7, 1).is_err());
    }

    #[test]
    fn recommend_k50_distractors_unique() {
        let (seqs, truth) = cohort(60);
        let t = build_recommend(&seqs[0], &truth, 50, 2).unwrap();
        let c = t.candidates.as_ref().unwrap();
        assert_eq!(c.len(), 50);
        let y = truth.weakest(&seqs[0].student_id).unwrap();
        assert_eq!(c.iter().filter(|x| *x == y).count(), 1);
        for i in 0..c.len() {
            for j in i + 1..c.len() {
                assert_ne!(c[i], c[j]);
            }
        }
        t.validate().unwrap();
        assert_eq!(t, build_recommend(&seqs[0], &truth, 50, 2).unwrap());
        assert!(t.instruction_text.ends_with(&c.join(", ")));
    }

    #[test]
    fn trace_targets_and_template() {
        let h = seq_of(vec![interaction(5, true, &["4"])]);
        let t = build_trace(&h, &interaction(7, true, &["6"])).unwrap();
        assert_eq!(t.target_text, "[True]");
        assert_eq!(
            t.instruction_text,
            "Based on the user's past problem-solving history, determine whether the following question can be answered correctly.\nQuestion: What is 7 minus 1?\nKnowledge Concept: Subtraction"
        );
        let f = build_trace(&h, &interaction(7, false, &["5"])).unwrap();
        assert_eq!(f.target_text, "[False]");
    }

    #[test]
    fn image_line_follows_concept() {
        let mut x = interaction(3, true, &["2"]);
        x.question_text = "Count the apples.\nImage: <image>".into();
        x.image_feature = Some(vec![0.0; 4]);
        let t = build_answerpredict(&seq_of(vec![interaction(1, true, &["0"])]), &x).unwrap();
        assert!(t.instruction_text.ends_with("Question: Count the apples.\nKnowledge Concept: Subtraction\nImage: <image>"));
    }

    #[test]
    fn timecost_and_answer_targets() {
        let h = seq_of(vec![interaction(5, true, &["4"])]);
        assert_eq!(build_timecost(&h, &interaction(0, true, &["1"])).unwrap().target_text, "0");
        let t = build_timecost(&h, &interaction(69, true, &["1"])).unwrap();
        assert_eq!(t.target_text, "69");
        assert!(t.instruction_text.contains("estimate how long the user will take to answer the following question (in seconds)."));
        assert_eq!(build_answerpredict(&h, &interaction(2, true, &["6.52"])).unwrap().target_text, r#"["6.52"]"#);
        let a = build_answerpredict(&h, &interaction(2, true, &["down", "5"])).unwrap();
        assert_eq!(a.target_text, r#"["down", "5"]"#);
        assert!(a.instruction_text.starts_with(ANSWER_HEAD));
        a.validate().unwrap();
    }

    #[test]
    fn leakage_rejected() {
        let x = interaction(5, true, &["4"]);
        let h = seq_of(vec![x.clone()]);
        assert!(matches!(build_trace(&h, &x), Err(Error::Leakage(_))));
        assert!(matches!(build_timecost(&h, &x), Err(Error::Leakage(_))));
        assert!(matches!(build_answerpredict(&h, &x), Err(Error::Leakage(_))));
    }

    proptest! {
        #[test]
        fn timecost_round_trips(t in 0i64..=86_400) {
            let h = seq_of(vec![interaction(100_000, true, &["4"])]);
            let inst = build_timecost(&h, &interaction(t, true, &["1"])).unwrap();
            prop_assert_eq!(inst.target_text.parse::<i64>().unwrap(), t);
        }
    }

    #[test]
    fn build_all_shares_histories_and_is_clean() {
        let (seqs, truth) = cohort(12);
        let (histories, set) = build_all(&seqs, &truth, &[5, 10], 3).unwrap();
        assert_eq!(set.trace.len(), histories.len());
        assert_eq!(set.timecost.len(), histories.len());
        assert_eq!(set.answer.len(), histories.len());
        assert_eq!(set.recommend[&5].len(), histories.len());
        for i in 0..histories.len() {
            let refs = [
                &set.trace[i].history_ref,
                &set.timecost[i].history_ref,
                &set.answer[i].history_ref,
                &set.recommend[&10][i].history_ref,
            ];
            assert!(refs.iter().all(|r| **r == HistoryRef::of(&histories[i])));
        }
        let report = scan_leakage(&seqs, &histories, set.all());
        assert_eq!(report.instances_checked, set.len());
        assert!(report.clean(), "{report:?}");
        // the scan does find a planted overlap
        let leaky: Vec<InteractionSequence> = seqs.clone();
        let bad = scan_leakage(&seqs, &leaky, set.all());
        assert_eq!(bad.violations, set.len());
    }

    #[test]
    fn task_files_round_trip() {
        let (seqs, truth) = cohort(12);
        let (_, set) = build_all(&seqs, &truth, &[5], 3).unwrap();
        let dir = tempfile::tempdir().unwrap();
        set.save(dir.path()).unwrap();
        assert_eq!(TaskSet::load(dir.path(), &[5, 10]).unwrap(), set);
        let line = std::fs::read_to_string(dir.path().join("trace.jsonl")).unwrap();
        let first = line.lines().next().unwrap();
        assert!(first.starts_with(r#"{"kind":"Trace","history_ref":{"student_id":"#));
        assert!(first.contains(r#""candidates":null,"target_text":"#));
    }

    #[test]
    fn single_interaction_history_is_accepted() {
        let full = seq_of(vec![interaction(1, true, &["0"]), interaction(2, false, &["9"])]);
        let (h, t) = split_history(&full).unwrap();
        assert_eq!(h.len(), 1);
        build_answerpredict(&h, &t).unwrap();
        assert!(split_history(&seq_of(vec![interaction(1, true, &["0"])])).is_none());
    }

    #[test]
    fn student_split_is_disjoint() {
        let (seqs, _) = cohort(12);
        let (train, test) = split_students(&seqs, 0.34, 1);
        assert!(!train.is_empty() && !test.is_empty());
        for s in &test {
            assert!(train.iter().all(|t| t.student_id != s.student_id));
        }
        assert_eq!(train.len() + test.len(), seqs.len());
    }
}
