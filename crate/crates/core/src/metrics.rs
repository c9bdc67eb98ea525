//! Evaluation metrics and the evaluation report.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

fn check_lengths(what: &str, a: usize, b: usize) -> Result<()> {
    if a != b {
        return Err(Error::Invalid(format!("{what}: {a} predictions for {b} gold labels")));
    }
    if a == 0 {
        return Err(Error::Invalid(format!("{what}: undefined on empty input")));
    }
    Ok(())
}

/// Fraction of instances whose top-ranked candidate is the ground truth.
/// Each item is `(ranked candidates, ground truth)`.
pub fn precision_at_1<S: AsRef<str>>(rankings: &[(Vec<S>, S)]) -> Result<f64> {
    if rankings.is_empty() {
        return Err(Error::Invalid("precision_at_1: undefined on empty input".into()));
    }
    let mut hits = 0usize;
    for (i, (ranked, gold)) in rankings.iter().enumerate() {
        let gold = gold.as_ref();
        if !ranked.iter().any(|c| c.as_ref() == gold) {
            return Err(Error::Invalid(format!(
                "precision_at_1: ground truth {gold:?} missing from candidates of instance {i}"
            )));
        }
        if ranked[0].as_ref() == gold {
            hits += 1;
        }
    }
    Ok(hits as f64 / rankings.len() as f64)
}

pub fn accuracy<T: PartialEq>(preds: &[T], golds: &[T]) -> Result<f64> {
    check_lengths("accuracy", preds.len(), golds.len())?;
    let hits = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(hits as f64 / preds.len() as f64)
}

pub fn mae(preds: &[i64], golds: &[i64]) -> Result<f64> {
    check_lengths("mae", preds.len(), golds.len())?;
    let total: f64 = preds.iter().zip(golds).map(|(p, g)| (p - g).abs() as f64).sum();
    Ok(total / preds.len() as f64)
}

/// Parses a JSON list of strings and trims each element.
pub fn normalize_answer_list(text: &str) -> Option<Vec<String>> {
    let items: Vec<String> = serde_json::from_str(text.trim()).ok()?;
    Some(items.into_iter().map(|s| s.trim().to_string()).collect())
}

/// Fraction of predictions equal to the gold after normalization. An
/// unparseable prediction is a non-match; an unparseable gold is an error.
pub fn exact_match<S: AsRef<str>>(preds: &[S], golds: &[S]) -> Result<f64> {
    check_lengths("exact_match", preds.len(), golds.len())?;
    let mut hits = 0usize;
    for (i, (p, g)) in preds.iter().zip(golds).enumerate() {
        let gold = normalize_answer_list(g.as_ref())
            .ok_or_else(|| Error::Invalid(format!("exact_match: gold {i} is not a JSON string list: {:?}", g.as_ref())))?;
        if normalize_answer_list(p.as_ref()).as_ref() == Some(&gold) {
            hits += 1;
        }
    }
    Ok(hits as f64 / preds.len() as f64)
}

/// Seconds from a generated time-cost answer: an integer, optionally
/// followed by `s`.
pub fn parse_seconds(text: &str) -> Option<i64> {
    let t = text.trim();
    let t = t.strip_suffix('s').unwrap_or(t).trim_end();
    t.parse().ok()
}

/// Lower median of a non-empty list.
pub fn median(values: &[i64]) -> Result<i64> {
    if values.is_empty() {
        return Err(Error::Invalid("median of an empty list".into()));
    }
    let mut v = values.to_vec();
    v.sort_unstable();
    Ok(v[(v.len() - 1) / 2])
}

/// MAE of generated time answers; unparseable ones are replaced by
/// `fallback`. Returns the MAE and the number of substitutions.
pub fn time_mae<S: AsRef<str>>(preds: &[S], golds: &[i64], fallback: i64) -> Result<(f64, usize)> {
    let mut substituted = 0;
    let parsed: Vec<i64> = preds
        .iter()
        .map(|p| {
            parse_seconds(p.as_ref()).unwrap_or_else(|| {
                substituted += 1;
                fallback
            })
        })
        .collect();
    Ok((mae(&parsed, golds)?, substituted))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraceScore {
    pub accuracy: f64,
    /// Accuracy of always predicting the most frequent gold label.
    pub majority_baseline: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TimeScore {
    pub mae: f64,
    /// MAE of always predicting the training-set median.
    pub median_baseline_mae: f64,
    pub median_s: i64,
    /// Predictions that did not parse and were replaced by the median.
    pub substituted: usize,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerScore {
    pub exact_match: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RecommendScore {
    pub precision_at_1: f64,
    /// Chance level `1/K`.
    pub chance: f64,
    pub n: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalReport {
    pub trace: Option<TraceScore>,
    pub timecost: Option<TimeScore>,
    pub answer: Option<AnswerScore>,
    /// Keyed by candidate-list size.
    pub recommend: BTreeMap<usize, RecommendScore>,
}

fn unit(name: &str, x: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&x) {
        return Err(Error::Invalid(format!("report: {name} = {x} outside [0, 1]")));
    }
    Ok(())
}

fn counted(name: &str, n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Invalid(format!("report: {name} has no instances")));
    }
    Ok(())
}

impl EvalReport {
    /// Range and count invariants.
    pub fn validate(&self) -> Result<()> {
        if let Some(t) = &self.trace {
            counted("trace", t.n)?;
            unit("trace accuracy", t.accuracy)?;
            unit("trace majority baseline", t.majority_baseline)?;
        }
        if let Some(t) = &self.timecost {
            counted("timecost", t.n)?;
            if !(t.mae >= 0.0 && t.mae.is_finite() && t.median_baseline_mae >= 0.0) {
                return Err(Error::Invalid(format!("report: invalid MAE {}", t.mae)));
            }
            if t.substituted > t.n {
                return Err(Error::Invalid("report: more substitutions than instances".into()));
            }
        }
        if let Some(a) = &self.answer {
            counted("answer", a.n)?;
            unit("exact match", a.exact_match)?;
        }
        for (k, r) in &self.recommend {
            counted(&format!("recommend K={k}"), r.n)?;
            unit(&format!("precision@1 K={k}"), r.precision_at_1)?;
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    /// Parses and validates a report; unknown fields are rejected.
    pub fn from_json(text: &str) -> Result<Self> {
        let r: Self = serde_json::from_str(text)?;
        r.validate()?;
        Ok(r)
    }

    /// Aligned text: one row per task metric, then the per-K breakdown.
    pub fn render(&self) -> String {
        let mut rows: Vec<[String; 4]> = vec![["task".into(), "metric".into(), "value".into(), "n".into()]];
        if let Some(t) = &self.trace {
            rows.push(["trace".into(), "accuracy".into(), format!("{:.4}", t.accuracy), t.n.to_string()]);
            rows.push(["".into(), "majority".into(), format!("{:.4}", t.majority_baseline), t.n.to_string()]);
        }
        if let Some(t) = &self.timecost {
            rows.push(["timecost".into(), "MAE (s)".into(), format!("{:.2}", t.mae), t.n.to_string()]);
            rows.push([
                "".into(),
                format!("median {}s", t.median_s),
                format!("{:.2}", t.median_baseline_mae),
                t.n.to_string(),
            ]);
            rows.push(["".into(), "substituted".into(), t.substituted.to_string(), t.n.to_string()]);
        }
        if let Some(a) = &self.answer {
            rows.push(["answer".into(), "EM".into(), format!("{:.4}", a.exact_match), a.n.to_string()]);
        }
        for (k, r) in &self.recommend {
            rows.push([
                "recommend".into(),
                format!("P@1 K={k}"),
                format!("{:.4}", r.precision_at_1),
                r.n.to_string(),
            ]);
        }
        let widths: Vec<usize> = (0..4).map(|c| rows.iter().map(|r| r[c].len()).max().unwrap_or(0)).collect();
        let mut out = String::new();
        for r in &rows {
            let line = format!(
                "{:<w0$}  {:<w1$}  {:>w2$}  {:>w3$}",
                r[0],
                r[1],
                r[2],
                r[3],
                w0 = widths[0],
                w1 = widths[1],
                w2 = widths[2],
                w3 = widths[3]
            );
            let _ = writeln!(out, "{}", line.trim_end());
        }
        out
    }
}

/// Fraction of the most frequent label.
pub fn majority_baseline<T: Ord + Clone>(golds: &[T]) -> Result<f64> {
    if golds.is_empty() {
        return Err(Error::Invalid("majority baseline of an empty list".into()));
    }
    let mut counts: BTreeMap<T, usize> = BTreeMap::new();
    for g in golds {
        *counts.entry(g.clone()).or_default() += 1;
    }
    Ok(*counts.values().max().expect("non-empty") as f64 / golds.len() as f64)
}
