//! Synthetic student cohorts with planted latent skills.
//!
//! Each concept `j` carries a discrimination vector `w_j` and a difficulty
//! `b_j`; student `i` answers a question on concept `j` correctly with
//! probability `σ(skill_i · w_j − b_j)`. Response times are the concept's
//! base time scaled by the student's speed and log-normal noise.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::{index, IndexedRandom};
use rand::Rng;
use rand_distr::{Distribution, LogNormal, Normal};
use serde::{Deserialize, Serialize};

use crate::interaction::{segment_history, Interaction, InteractionSequence, IMAGE_PLACEHOLDER};
use crate::seed::stream;
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CountRange {
    pub min: usize,
    pub max: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CohortConfig {
    pub n_students: usize,
    pub n_concepts: usize,
    pub n_questions: usize,
    pub interactions_per_student: CountRange,
    pub skill_dim: usize,
    pub seed: u64,
    /// Interactions per emitted sequence.
    pub window: usize,
    /// Fraction of questions carrying an `<image>` placeholder.
    pub image_fraction: f64,
    pub image_dim: usize,
    /// Range of per-concept mean response times, seconds.
    pub base_time_s: [f64; 2],
}

impl Default for CohortConfig {
    fn default() -> Self {
        Self {
            n_students: 132,
            n_concepts: 82,
            n_questions: 2_356,
            interactions_per_student: CountRange { min: 200, max: 350 },
            skill_dim: 8,
            seed: 0,
            window: crate::interaction::DEFAULT_WINDOW,
            image_fraction: 0.2,
            image_dim: 16,
            base_time_s: [10.0, 150.0],
        }
    }
}

impl CohortConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: &str| Err(Error::Config(format!("cohort: {m}")));
        let r = self.interactions_per_student;
        if self.n_students == 0 || self.n_concepts == 0 || self.skill_dim == 0 {
            return fail("n_students, n_concepts and skill_dim must be positive");
        }
        if self.n_questions < self.n_concepts {
            return fail("n_questions must be >= n_concepts");
        }
        if r.min == 0 || r.min > r.max {
            return fail("interactions_per_student needs 1 <= min <= max");
        }
        if r.max > self.n_questions {
            return fail("interactions_per_student.max exceeds n_questions (questions are not repeated)");
        }
        if self.window == 0 || self.image_dim == 0 {
            return fail("window and image_dim must be positive");
        }
        if !(0.0..=1.0).contains(&self.image_fraction) {
            return fail("image_fraction must lie in [0, 1]");
        }
        let [lo, hi] = self.base_time_s;
        if !(lo > 0.0 && lo <= hi && hi < 3_600.0) {
            return fail("base_time_s must satisfy 0 < lo <= hi < 3600");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LatentStudent {
    pub student_id: String,
    /// Entries in [-3, 3].
    pub skill: Vec<f64>,
    /// Response-time multiplier in [0.5, 2].
    pub speed: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConceptTruth {
    pub name: String,
    pub w: Vec<f64>,
    pub b: f64,
    pub base_time_s: f64,
}

impl ConceptTruth {
    pub fn logit(&self, skill: &[f64]) -> f64 {
        skill.iter().zip(&self.w).map(|(s, w)| s * w).sum::<f64>() - self.b
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudentTruth {
    #[serde(flatten)]
    pub latent: LatentStudent,
    /// Every concept, weakest (lowest expected correctness) first.
    pub weak_concepts: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub config: CohortConfig,
    pub concepts: Vec<ConceptTruth>,
    pub students: Vec<StudentTruth>,
}

impl GroundTruth {
    pub fn concept_inventory(&self) -> Vec<String> {
        self.concepts.iter().map(|c| c.name.clone()).collect()
    }

    pub fn student(&self, student_id: &str) -> Option<&StudentTruth> {
        self.students.iter().find(|s| s.latent.student_id == student_id)
    }

    /// The recommendation label Y for a student.
    pub fn weakest(&self, student_id: &str) -> Option<&str> {
        self.student(student_id)
            .and_then(|s| s.weak_concepts.first())
            .map(String::as_str)
    }

    pub fn expected_correctness(&self, student: &LatentStudent, concept: usize) -> f64 {
        sigmoid(self.concepts[concept].logit(&student.skill))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// `data/cohort.jsonl` → `data/cohort.truth.json`.
pub fn truth_path(dataset: impl AsRef<Path>) -> PathBuf {
    dataset.as_ref().with_extension("truth.json")
}

const ACTIONS: [&str; 8] = [
    "calculating",
    "comparing",
    "estimating",
    "simplifying",
    "solving",
    "converting",
    "measuring",
    "rounding",
];
const OBJECTS: [&str; 16] = [
    "average speed",
    "fractions",
    "decimals",
    "percentages",
    "ratios",
    "linear equations",
    "triangle areas",
    "rectangle perimeters",
    "cube volumes",
    "polygon angles",
    "prime factors",
    "place values",
    "time intervals",
    "unit prices",
    "mixed numbers",
    "negative numbers",
];

fn concept_names(n: usize) -> Vec<String> {
    let base: Vec<String> = OBJECTS
        .iter()
        .flat_map(|o| ACTIONS.iter().map(move |a| format!("{a} {o}")))
        .collect();
    (0..n)
        .map(|i| {
            let name = &base[(i * 37) % base.len()];
            match i / base.len() {
                0 => name.clone(),
                round => format!("{name} level {}", round + 1),
            }
        })
        .collect()
}

const TEMPLATES: [&str; 4] = [
    "Problem {id}. While practising {concept}, a pupil is given the numbers {x} and {y}. Work out the result and write it in the answer box.",
    "Problem {id}. A worksheet on {concept} lists the values {x} and {y}. Use them to find the missing number and show your final answer.",
    "Problem {id}. In a lesson about {concept}, the teacher writes {x} and {y} on the board. What number should the class write down?",
    "Problem {id}. Read the task carefully. It tests {concept} using the quantities {x} and {y}. Give the correct value as a whole number.",
];
const TWO_BLANK_SUFFIX: &str = " Also say whether the value goes up or down.";

struct Question {
    concept: usize,
    text: String,
    answer: Vec<String>,
    image_feature: Option<Vec<f64>>,
}

fn build_questions(cfg: &CohortConfig, names: &[String]) -> Vec<Question> {
    let mut rng = stream(cfg.seed, "questions");
    let mut protos = stream(cfg.seed, "image-prototypes");
    let unit = Normal::new(0.0, 1.0).expect("valid normal");
    let prototypes: Vec<Vec<f64>> = (0..cfg.n_concepts)
        .map(|_| (0..cfg.image_dim).map(|_| unit.sample(&mut protos)).collect())
        .collect();
    let noise = Normal::new(0.0, 0.3).expect("valid normal");
    (0..cfg.n_questions)
        .map(|q| {
            let concept = if q < cfg.n_concepts { q } else { rng.random_range(0..cfg.n_concepts) };
            let x: u32 = rng.random_range(2..100);
            let y: u32 = rng.random_range(2..100);
            let template = *TEMPLATES.choose(&mut rng).expect("templates");
            let mut text = template
                .replace("{id}", &(q + 1).to_string())
                .replace("{concept}", &names[concept])
                .replace("{x}", &x.to_string())
                .replace("{y}", &y.to_string());
            let value = ((x * y + q as u32) % 97 + 1).to_string();
            let answer = if rng.random_bool(0.25) {
                text.push_str(TWO_BLANK_SUFFIX);
                let dir = if x >= y { "up" } else { "down" };
                vec![dir.to_string(), value]
            } else {
                vec![value]
            };
            let image_feature = rng.random_bool(cfg.image_fraction).then(|| {
                text.push_str("\nImage: ");
                text.push_str(IMAGE_PLACEHOLDER);
                prototypes[concept].iter().map(|p| p + noise.sample(&mut rng)).collect()
            });
            Question {
                concept,
                text,
                answer,
                image_feature,
            }
        })
        .collect()
}

/// A wrong answer fixed by (student, question).
fn distractor(seed: u64, student_id: &str, qid: usize, answer: &[String]) -> Vec<String> {
    let mut rng = stream(seed, &format!("distractor/{student_id}/{qid}"));
    let last = answer.len() - 1;
    let mut out = answer.to_vec();
    let flip_direction = answer.len() > 1 && rng.random_bool(0.5);
    if flip_direction {
        out[0] = if out[0] == "up" { "down".into() } else { "up".into() };
    } else {
        let v: i64 = out[last].parse().expect("numeric answer");
        let delta = rng.random_range(1..=9) * if rng.random_bool(0.5) { 1 } else { -1 };
        let mut w = v + delta;
        if w < 0 {
            w = v + delta.abs();
        }
        out[last] = w.to_string();
    }
    out
}

fn sample_concepts(cfg: &CohortConfig) -> Vec<ConceptTruth> {
    let mut rng = stream(cfg.seed, "concepts");
    let [lo, hi] = cfg.base_time_s;
    concept_names(cfg.n_concepts)
        .into_iter()
        .map(|name| {
            let w = (0..cfg.skill_dim).map(|_| rng.random_range(0.15..0.5)).collect();
            let b = rng.random_range(-3.0..3.0);
            let base_time_s = (lo.ln() + rng.random::<f64>() * (hi.ln() - lo.ln())).exp();
            ConceptTruth {
                name,
                w,
                b,
                base_time_s,
            }
        })
        .collect()
}

pub fn student_id(i: usize) -> String {
    format!("s{i:05}")
}

fn sample_student(cfg: &CohortConfig, id: &str) -> LatentStudent {
    let mut rng = stream(cfg.seed, &format!("latent/{id}"));
    let skill_dist = Normal::new(0.0f64, 1.5).expect("valid normal");
    let speed_dist = LogNormal::new(0.0f64, 0.35).expect("valid lognormal");
    LatentStudent {
        student_id: id.to_string(),
        skill: (0..cfg.skill_dim)
            .map(|_| skill_dist.sample(&mut rng).clamp(-3.0, 3.0))
            .collect(),
        speed: speed_dist.sample(&mut rng).clamp(0.5, 2.0),
    }
}

/// Concepts ordered by ascending expected correctness, ties by name.
pub fn rank_weak_concepts(concepts: &[ConceptTruth], student: &LatentStudent) -> Vec<String> {
    let mut scored: Vec<(f64, &str)> = concepts
        .iter()
        .map(|c| (sigmoid(c.logit(&student.skill)), c.name.as_str()))
        .collect();
    scored.sort_by(|a, b| a.0.total_cmp(&b.0).then_with(|| a.1.cmp(b.1)));
    scored.into_iter().map(|(_, n)| n.to_string()).collect()
}

/// Generates the cohort: a pure function of `config`.
pub fn generate_cohort(config: &CohortConfig) -> Result<(Vec<InteractionSequence>, GroundTruth)> {
    config.validate()?;
    let concepts = sample_concepts(config);
    let names: Vec<String> = concepts.iter().map(|c| c.name.clone()).collect();
    let questions = build_questions(config, &names);
    let time_noise = LogNormal::new(0.0, 0.25).expect("valid lognormal");
    let r = config.interactions_per_student;
    let mut sequences = Vec::new();
    let mut students = Vec::with_capacity(config.n_students);
    for i in 0..config.n_students {
        let id = student_id(i);
        let latent = sample_student(config, &id);
        let mut rng = stream(config.seed, &format!("history/{id}"));
        let n = rng.random_range(r.min..=r.max);
        let history: Vec<Interaction> = index::sample(&mut rng, questions.len(), n)
            .into_iter()
            .map(|qid| {
                let q = &questions[qid];
                let c = &concepts[q.concept];
                let correct = rng.random_bool(sigmoid(c.logit(&latent.skill)));
                let t = (c.base_time_s * latent.speed * time_noise.sample(&mut rng)).round();
                Interaction {
                    question_text: q.text.clone(),
                    image_feature: q.image_feature.clone(),
                    user_answer: if correct {
                        q.answer.clone()
                    } else {
                        distractor(config.seed, &id, qid, &q.answer)
                    },
                    knowledge_concept: c.name.clone(),
                    correct,
                    response_time_s: (t as i64).clamp(1, crate::interaction::MAX_RESPONSE_TIME_S),
                }
            })
            .collect();
        sequences.extend(segment_history(&id, &history, config.window));
        students.push(StudentTruth {
            weak_concepts: rank_weak_concepts(&concepts, &latent),
            latent,
        });
    }
    Ok((
        sequences,
        GroundTruth {
            config: config.clone(),
            concepts,
            students,
        },
    ))
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StatsReport {
    pub students: usize,
    pub concepts: usize,
    pub questions: usize,
    pub interactions: usize,
}

impl StatsReport {
    pub fn rows(&self) -> [(&'static str, usize); 4] {
        [
            ("# Students", self.students),
            ("# Knowledge", self.concepts),
            ("# Questions", self.questions),
            ("# Interactions", self.interactions),
        ]
    }

    pub fn render(&self) -> String {
        let mut out = String::from("Statistic        Count\n");
        for (name, v) in self.rows() {
            let _ = writeln!(out, "{name:<15} {v:>7}");
        }
        out
    }
}

pub fn cohort_stats(sequences: &[InteractionSequence]) -> StatsReport {
    let mut students = BTreeSet::new();
    let mut concepts = BTreeSet::new();
    let mut questions = BTreeSet::new();
    let mut interactions = 0;
    for s in sequences {
        students.insert(s.student_id.as_str());
        for x in &s.interactions {
            concepts.insert(x.knowledge_concept.as_str());
            questions.insert(x.question_text.as_str());
            interactions += 1;
        }
    }
    StatsReport {
        students: students.len(),
        concepts: concepts.len(),
        questions: questions.len(),
        interactions,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::interaction::SequenceLimits;

    fn small() -> CohortConfig {
        CohortConfig {
            n_students: 12,
            n_concepts: 10,
            n_questions: 200,
            interactions_per_student: CountRange { min: 30, max: 60 },
            window: 25,
            seed: 3,
            ..Default::default()
        }
    }

    #[test]
    fn same_seed_same_bytes() {
        let (a, ta) = generate_cohort(&small()).unwrap();
        let (b, tb) = generate_cohort(&small()).unwrap();
        assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
        assert_eq!(serde_json::to_string(&ta).unwrap(), serde_json::to_string(&tb).unwrap());
        let (c, _) = generate_cohort(&CohortConfig { seed: 4, ..small() }).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn strong_student_on_neutral_concept() {
        let cfg = small();
        let concepts = sample_concepts(&cfg);
        let c = ConceptTruth { b: 0.0, ..concepts[0].clone() };
        let skill = vec![3.0; cfg.skill_dim];
        let p = sigmoid(c.logit(&skill));
        let mut rng = stream(1, "mc");
        let draws = 400;
        let hits = (0..draws).filter(|_| rng.random_bool(p)).count();
        assert!(p >= 0.97, "analytic {p}");
        assert!(hits as f64 / draws as f64 >= 0.95, "empirical {hits}/{draws}");
    }

    #[test]
    fn weakest_label_is_brute_force_argmin() {
        let (_, truth) = generate_cohort(&small()).unwrap();
        for s in &truth.students {
            let mut best = (f64::INFINITY, String::new());
            for (j, c) in truth.concepts.iter().enumerate() {
                let p = truth.expected_correctness(&s.latent, j);
                if p < best.0 {
                    best = (p, c.name.clone());
                }
            }
            assert_eq!(truth.weakest(&s.latent.student_id), Some(best.1.as_str()));
        }
    }

    #[test]
    fn labels_come_from_inventory_and_latents_are_bounded() {
        let (seqs, truth) = generate_cohort(&small()).unwrap();
        let inventory: BTreeSet<String> = truth.concept_inventory().into_iter().collect();
        assert_eq!(inventory.len(), truth.concepts.len());
        for s in &truth.students {
            assert!(inventory.contains(truth.weakest(&s.latent.student_id).unwrap()));
            assert!(s.latent.skill.iter().all(|x| (-3.0..=3.0).contains(x)));
            assert!((0.5..=2.0).contains(&s.latent.speed));
        }
        let limits = SequenceLimits {
            max_window: 25,
            ..Default::default()
        };
        for s in &seqs {
            s.validate(&limits).unwrap();
        }
    }

    #[test]
    fn stats_shape_and_counts() {
        assert_eq!(cohort_stats(&[]), StatsReport::default());
        let cfg = small();
        let (seqs, _) = generate_cohort(&cfg).unwrap();
        let stats = cohort_stats(&seqs);
        assert_eq!(stats.rows().len(), 4);
        assert_eq!(stats.students, cfg.n_students);
        let r = cfg.interactions_per_student;
        assert!(stats.interactions >= r.min * cfg.n_students);
        assert!(stats.interactions <= r.max * cfg.n_students);
        let direct: usize = seqs.iter().map(|s| s.len()).sum();
        assert_eq!(stats.interactions, direct);
        // full-scale reference: about 294 interactions per student
        let per_student = 3_892_084.0 / 13_239.0;
        assert!((per_student - 294.0f64).abs() < 1.0 && per_student < 300.0);
    }

    #[test]
    fn default_cohort_is_verbose_enough() {
        let cfg = CohortConfig {
            n_students: 3,
            ..Default::default()
        };
        let (seqs, _) = generate_cohort(&cfg).unwrap();
        let n: usize = seqs.iter().map(|s| s.len()).sum();
        let tokens: usize = seqs.iter().map(|s| s.token_count()).sum();
        assert!(tokens as f64 / n as f64 >= 50.0, "{} tokens per interaction", tokens as f64 / n as f64);
        for s in &seqs {
            s.validate(&SequenceLimits::default()).unwrap();
        }
    }

    #[test]
    fn images_follow_placeholder() {
        let (seqs, _) = generate_cohort(&small()).unwrap();
        let all: Vec<&Interaction> = seqs.iter().flat_map(|s| &s.interactions).collect();
        let with = all.iter().filter(|x| x.has_image()).count();
        assert!(with > 0 && with < all.len());
        for x in all {
            assert_eq!(x.has_image(), x.question_text.contains(IMAGE_PLACEHOLDER));
            if !x.correct {
                assert_ne!(x.user_answer.len(), 0);
            }
        }
    }

    #[test]
    fn distractors_differ_and_are_stable() {
        let ans = vec!["down".to_string(), "5".to_string()];
        for q in 0..200 {
            let d = distractor(9, "s00001", q, &ans);
            assert_ne!(d, ans);
            assert_eq!(d, distractor(9, "s00001", q, &ans));
        }
    }

    #[test]
    fn invalid_configs_rejected() {
        for bad in [
            CohortConfig { n_questions: 5, n_concepts: 10, ..small() },
            CohortConfig { interactions_per_student: CountRange { min: 5, max: 4 }, ..small() },
            CohortConfig { interactions_per_student: CountRange { min: 5, max: 500 }, ..small() },
            CohortConfig { image_fraction: 1.5, ..small() },
        ] {
            assert!(generate_cohort(&bad).is_err());
        }
    }

    /// Logistic regression on features `skill ⊙ w_j` and `b_j`, fit on one
    /// half of the draws by Newton steps, scored on the other half.
    #[test]
    fn planted_structure_is_learnable() {
        let cfg = CohortConfig {
            n_students: 60,
            n_concepts: 30,
            n_questions: 600,
            interactions_per_student: CountRange { min: 100, max: 100 },
            window: 100,
            seed: 17,
            ..Default::default()
        };
        let (seqs, truth) = generate_cohort(&cfg).unwrap();
        let index: std::collections::HashMap<&str, usize> =
            truth.concepts.iter().enumerate().map(|(j, c)| (c.name.as_str(), j)).collect();
        let mut rows = Vec::new();
        for s in &seqs {
            let st = &truth.student(&s.student_id).unwrap().latent;
            for x in &s.interactions {
                let c = &truth.concepts[index[x.knowledge_concept.as_str()]];
                let mut f: Vec<f64> = st.skill.iter().zip(&c.w).map(|(a, b)| a * b).collect();
                f.push(c.b);
                f.push(1.0);
                rows.push((f, x.correct));
            }
        }
        let (train, test) = rows.split_at(rows.len() / 2);
        let dim = train[0].0.len();
        let mut beta = vec![0.0; dim];
        for _ in 0..25 {
            let mut grad = vec![0.0; dim];
            let mut hess = vec![vec![0.0; dim]; dim];
            for (f, y) in train {
                let p = sigmoid(f.iter().zip(&beta).map(|(a, b)| a * b).sum());
                let r = p - if *y { 1.0 } else { 0.0 };
                for i in 0..dim {
                    grad[i] += r * f[i];
                    for k in 0..dim {
                        hess[i][k] += p * (1.0 - p) * f[i] * f[k];
                    }
                }
            }
            for (i, row) in hess.iter_mut().enumerate() {
                row[i] += 1e-6;
            }
            let step = solve(hess, grad);
            for i in 0..dim {
                beta[i] -= step[i];
            }
        }
        let correct = test
            .iter()
            .filter(|(f, y)| (f.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>() > 0.0) == *y)
            .count();
        let acc = correct as f64 / test.len() as f64;
        assert!(acc > 0.75, "held-out accuracy {acc}");
    }

    fn solve(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
        let n = b.len();
        for c in 0..n {
            let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
            a.swap(c, p);
            b.swap(c, p);
            for r in c + 1..n {
                let f = a[r][c] / a[c][c];
                for k in c..n {
                    a[r][k] -= f * a[c][k];
                }
                b[r] -= f * b[c];
            }
        }
        let mut x = vec![0.0; n];
        for r in (0..n).rev() {
            let s: f64 = (r + 1..n).map(|k| a[r][k] * x[k]).sum();
            x[r] = (b[r] - s) / a[r][r];
        }
        x
    }
}
