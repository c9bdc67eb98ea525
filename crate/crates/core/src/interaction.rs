//! Interaction records, history windowing and the JSONL dataset format.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::tokenizer::count_pieces;
use crate::{Error, Result};

/// Literal placeholder marking where a question's figure sits.
pub const IMAGE_PLACEHOLDER: &str = "<image>";
/// Default maximum number of interactions per sequence.
pub const DEFAULT_WINDOW: usize = 300;
/// Default token budget for one serialized history.
pub const DEFAULT_TOKEN_BUDGET: usize = 45_000;
/// Upper bound accepted for a single response time.
pub const MAX_RESPONSE_TIME_S: i64 = 86_400;

/// One exercise attempt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Interaction {
    pub question_text: String,
    pub image_feature: Option<Vec<f64>>,
    pub user_answer: Vec<String>,
    pub knowledge_concept: String,
    pub correct: bool,
    pub response_time_s: i64,
}

/// A window of one student's chronological history.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InteractionSequence {
    pub student_id: String,
    pub segment_index: usize,
    pub interactions: Vec<Interaction>,
}

/// Renders an answer list as a JSON array with `", "` separators, e.g. `["down", "5"]`.
pub fn format_answer_list(answers: &[String]) -> String {
    let items: Vec<String> = answers
        .iter()
        .map(|a| serde_json::to_string(a).expect("string serialization is infallible"))
        .collect();
    format!("[{}]", items.join(", "))
}

/// Splits the image placeholder (and a trailing `Image:` label) off a question.
///
/// Returns the prose and whether a placeholder was present.
pub fn split_image_placeholder(question_text: &str) -> (String, bool) {
    if !question_text.contains(IMAGE_PLACEHOLDER) {
        return (question_text.to_string(), false);
    }
    let stripped = question_text.replacen(IMAGE_PLACEHOLDER, "", 1);
    let mut prose = stripped.trim_end().to_string();
    if let Some(head) = prose.strip_suffix("Image:") {
        prose = head.trim_end().to_string();
    }
    (prose, true)
}

impl Interaction {
    /// Text layout of one history record:
    ///
    /// ```text
    /// Question: ...
    /// User Answer: ["..."]
    /// Correct: True
    /// Response Time: 61s
    /// Knowledge Concept: ...
    /// ```
    pub fn render(&self) -> String {
        format!(
            "Question: {}\nUser Answer: {}\nCorrect: {}\nResponse Time: {}s\nKnowledge Concept: {}",
            self.question_text,
            format_answer_list(&self.user_answer),
            if self.correct { "True" } else { "False" },
            self.response_time_s,
            self.knowledge_concept
        )
    }

    pub fn has_image(&self) -> bool {
        self.image_feature.is_some()
    }

    /// Checks the record invariants. `record` names the record in errors.
    pub fn validate(&self, record: &str) -> Result<()> {
        let invalid = |field: &'static str, message: String| Error::Validation {
            record: record.to_string(),
            field,
            message,
        };
        let placeholders = self.question_text.matches(IMAGE_PLACEHOLDER).count();
        match (&self.image_feature, placeholders) {
            (Some(f), 1) => {
                if f.is_empty() {
                    return Err(invalid("image_feature", "empty feature vector".into()));
                }
                if f.iter().any(|x| !x.is_finite()) {
                    return Err(invalid("image_feature", "non-finite entry".into()));
                }
            }
            (None, 0) => {}
            (Some(_), n) => {
                return Err(invalid(
                    "image_feature",
                    format!("feature present but question has {n} `<image>` placeholders"),
                ))
            }
            (None, n) => {
                return Err(invalid(
                    "image_feature",
                    format!("missing although question has {n} `<image>` placeholders"),
                ))
            }
        }
        if self.user_answer.is_empty() {
            return Err(invalid("user_answer", "empty answer list".into()));
        }
        if self.user_answer.iter().any(|a| a.is_empty()) {
            return Err(invalid("user_answer", "empty answer element".into()));
        }
        if self.knowledge_concept.is_empty() {
            return Err(invalid("knowledge_concept", "empty".into()));
        }
        if !(0..=MAX_RESPONSE_TIME_S).contains(&self.response_time_s) {
            return Err(invalid(
                "response_time_s",
                format!(
                    "{} outside [0, {MAX_RESPONSE_TIME_S}]",
                    self.response_time_s
                ),
            ));
        }
        Ok(())
    }
}

impl InteractionSequence {
    pub fn len(&self) -> usize {
        self.interactions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.interactions.is_empty()
    }

    /// `student_id#segment_index`, used to name records in errors.
    pub fn key(&self) -> String {
        format!("{}#{}", self.student_id, self.segment_index)
    }

    /// Number of tokenizer pieces in the full serialized history.
    pub fn token_count(&self) -> usize {
        self.interactions
            .iter()
            .map(|x| count_pieces(&x.render()))
            .sum()
    }

    pub fn validate(&self, limits: &SequenceLimits) -> Result<()> {
        let key = self.key();
        if self.interactions.is_empty() {
            return Err(Error::Validation {
                record: key,
                field: "interactions",
                message: "empty sequence".into(),
            });
        }
        if self.interactions.len() > limits.max_window {
            return Err(Error::Validation {
                record: key,
                field: "interactions",
                message: format!(
                    "{} interactions exceed window {}",
                    self.interactions.len(),
                    limits.max_window
                ),
            });
        }
        for (i, x) in self.interactions.iter().enumerate() {
            x.validate(&format!("{key}/{i}"))?;
        }
        let tokens = self.token_count();
        if tokens > limits.token_budget {
            return Err(Error::Validation {
                record: key,
                field: "interactions",
                message: format!("{tokens} tokens exceed budget {}", limits.token_budget),
            });
        }
        Ok(())
    }
}

/// Bounds enforced on every loaded sequence.
#[derive(Debug, Clone, Copy)]
pub struct SequenceLimits {
    pub max_window: usize,
    pub token_budget: usize,
}

impl Default for SequenceLimits {
    fn default() -> Self {
        Self {
            max_window: DEFAULT_WINDOW,
            token_budget: DEFAULT_TOKEN_BUDGET,
        }
    }
}

/// Cuts a chronological history into consecutive windows of at most `window` interactions.
pub fn segment_history(
    student_id: &str,
    interactions: &[Interaction],
    window: usize,
) -> Vec<InteractionSequence> {
    assert!(window >= 1, "window must be positive");
    interactions
        .chunks(window)
        .enumerate()
        .map(|(segment_index, chunk)| InteractionSequence {
            student_id: student_id.to_string(),
            segment_index,
            interactions: chunk.to_vec(),
        })
        .collect()
}

/// Loads a JSONL dataset with the default limits.
pub fn load_dataset(path: impl AsRef<Path>) -> Result<Vec<InteractionSequence>> {
    load_dataset_with(path, &SequenceLimits::default())
}

pub fn load_dataset_with(
    path: impl AsRef<Path>,
    limits: &SequenceLimits,
) -> Result<Vec<InteractionSequence>> {
    read_jsonl(path.as_ref(), |seq: &InteractionSequence| seq.validate(limits))
}

pub fn save_dataset(sequences: &[InteractionSequence], path: impl AsRef<Path>) -> Result<()> {
    write_jsonl(path.as_ref(), sequences)
}

/// Reads one JSON value per non-blank line, validating each.
pub(crate) fn read_jsonl<T, F>(path: &Path, mut validate: F) -> Result<Vec<T>>
where
    T: for<'de> Deserialize<'de>,
    F: FnMut(&T) -> Result<()>,
{
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let value: T = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            message: e.to_string(),
        })?;
        validate(&value)?;
        out.push(value);
    }
    Ok(out)
}

pub(crate) fn write_jsonl<T: Serialize>(path: &Path, records: &[T]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
