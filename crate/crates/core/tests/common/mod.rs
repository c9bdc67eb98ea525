#![allow(dead_code)]

use edu_core::cohort::{generate_cohort, CohortConfig, CountRange};
use edu_core::interaction::Interaction;
use edu_core::model::network::init_params;
use edu_core::model::train::{batch_loss, PreparedHistory, PreparedTask};
use edu_core::model::{prompt_ids, target_ids, ModelConfig, Tokenizer, UniModel};
use edu_core::nn::{grad_check, grad_check_inputs, Graph, ParamStore, Tensor, Var};
use edu_core::seed::stream;
use edu_core::tasks::{HistoryRef, TaskKind};
use edu_core::Result;
use rand::Rng;

pub const EPS: f64 = 1e-6;

fn rand_tensor(rows: usize, cols: usize, label: &str) -> Tensor<f64> {
    let mut rng = stream(11, label);
    Tensor::from_rows(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// Scalar readout `sum(x ⊙ r)` with a fixed random `r`, so every output
/// entry gets a distinct upstream gradient.
fn probe(g: &mut Graph<'_, f64>, x: Var, label: &str) -> Result<Var> {
    let t = g.value(x);
    let r = g.constant(rand_tensor(t.rows(), t.cols(), label));
    let m = g.mul(x, r)?;
    Ok(g.sum(m))
}

type Case = (&'static str, Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<'_, f64>, &[Var]) -> Result<Var>>);

fn cases() -> Vec<Case> {
    let x = || rand_tensor(4, 6, "x");
    vec![
        ("matmul", vec![x(), rand_tensor(6, 3, "w")], Box::new(|g, v| {
            let y = g.matmul(v[0], v[1])?;
            probe(g, y, "p")
        })),
        ("add", vec![x(), rand_tensor(4, 6, "y")], Box::new(|g, v| {
            let y = g.add(v[0], v[1])?;
            probe(g, y, "p")
        })),
        ("mul", vec![x(), rand_tensor(4, 6, "y")], Box::new(|g, v| {
            let y = g.mul(v[0], v[1])?;
            probe(g, y, "p")
        })),
        ("add_row", vec![x(), rand_tensor(1, 6, "b")], Box::new(|g, v| {
            let y = g.add_row(v[0], v[1])?;
            probe(g, y, "p")
        })),
        ("scale", vec![x()], Box::new(|g, v| {
            let y = g.scale(v[0], -1.7);
            probe(g, y, "p")
        })),
        ("linear", vec![x(), rand_tensor(6, 5, "w"), rand_tensor(1, 5, "b")], Box::new(|g, v| {
            let y = g.linear(v[0], v[1], v[2])?;
            probe(g, y, "p")
        })),
        ("layer_norm", vec![x(), rand_tensor(1, 6, "g"), rand_tensor(1, 6, "b")], Box::new(|g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            probe(g, y, "p")
        })),
        ("softmax", vec![x()], Box::new(|g, v| {
            let y = g.softmax(v[0]);
            probe(g, y, "p")
        })),
        ("gelu", vec![x()], Box::new(|g, v| {
            let y = g.gelu(v[0]);
            probe(g, y, "p")
        })),
        ("embedding", vec![rand_tensor(7, 4, "table")], Box::new(|g, v| {
            let y = g.embedding(v[0], &[3, 0, 3, 6, 1])?;
            probe(g, y, "p")
        })),
        ("concat_rows", vec![x(), rand_tensor(2, 6, "y")], Box::new(|g, v| {
            let y = g.concat_rows(&[v[0], v[1]])?;
            probe(g, y, "p")
        })),
        ("gather_rows", vec![x()], Box::new(|g, v| {
            let y = g.gather_rows(v[0], &[2, 0, 2, 3])?;
            probe(g, y, "p")
        })),
        ("overwrite_rows", vec![x(), rand_tensor(2, 6, "src")], Box::new(|g, v| {
            let y = g.overwrite_rows(v[0], v[1], &[1, 3])?;
            probe(g, y, "p")
        })),
        ("attention", vec![rand_tensor(5, 12, "qkv")], Box::new(|g, v| {
            let y = g.attention(v[0], 2, &[(0, 3), (3, 2)], false)?;
            probe(g, y, "p")
        })),
        ("attention_causal", vec![rand_tensor(5, 12, "qkv")], Box::new(|g, v| {
            let y = g.attention(v[0], 2, &[(0, 2), (2, 3)], true)?;
            probe(g, y, "p")
        })),
        ("cross_entropy", vec![rand_tensor(4, 5, "logits")], Box::new(|g, v| {
            g.cross_entropy(v[0], &[Some(1), None, Some(4), Some(0)])
        })),
        ("sum", vec![x()], Box::new(|g, v| {
            let y = g.mul(v[0], v[0])?;
            Ok(g.sum(y))
        })),
    ]
}

/// Maximum relative finite-difference error of every differentiable op.
pub fn op_gradient_errors() -> Vec<(&'static str, f64)> {
    cases()
        .into_iter()
        .map(|(name, inputs, f)| (name, grad_check_inputs(&inputs, |g, v| f(g, v), EPS).unwrap()))
        .collect()
}

/// Two-layer encoder and decoder at f64 on two short histories, one of
/// which carries an image. Returns the parameter count and the error.
pub fn end_to_end_gradient_error() -> (usize, f64) {
    let tok = Tokenizer::fit(
        ["Question: Add 2 <image> sums Answer Correct Response Time Knowledge Concept", "[True]"],
        110,
    )
    .unwrap();
    let cfg = ModelConfig {
        encoder_layers: 2,
        encoder_heads: 2,
        encoder_hidden: 6,
        lm_layers: 2,
        lm_heads: 2,
        lm_hidden: 6,
        m: 2,
        max_history: 4,
        vocab_size: tok.vocab_size(),
        max_interaction_tokens: 64,
        max_text_tokens: 24,
        image_dim: 4,
        ffn_mult: 2,
        init_std: 0.5,
    };
    let params: ParamStore<f64> = init_params(&cfg, 7).unwrap();
    let model = UniModel::new(cfg.clone(), tok.clone(), 0).unwrap();
    let (seqs, _) = generate_cohort(&CohortConfig {
        n_students: 2,
        n_concepts: 4,
        n_questions: 20,
        interactions_per_student: CountRange { min: 4, max: 4 },
        window: 4,
        image_dim: 4,
        ..Default::default()
    })
    .unwrap();
    let prepared: Vec<PreparedHistory> = seqs
        .iter()
        .take(2)
        .map(|h| {
            let mut s = h.clone();
            s.interactions.truncate(2);
            for x in &mut s.interactions {
                *x = Interaction {
                    question_text: "Add 2".into(),
                    image_feature: None,
                    user_answer: vec!["5".into()],
                    knowledge_concept: "sums".into(),
                    ..x.clone()
                };
            }
            s.interactions[0].question_text = "<image>".into();
            s.interactions[0].image_feature = Some(vec![0.3, -1.2, 0.8, 0.1]);
            PreparedHistory {
                key: HistoryRef::of(&s),
                interactions: model.serialize(&s),
                tasks: vec![
                    PreparedTask {
                        kind: TaskKind::Trace,
                        prompt: prompt_ids(&tok, "Question: 5"),
                        target: target_ids(&tok, "[True]"),
                    },
                    PreparedTask {
                        kind: TaskKind::TimeCost,
                        prompt: prompt_ids(&tok, "Time"),
                        target: target_ids(&tok, "42"),
                    },
                ],
            }
        })
        .collect();
    assert!(prepared[0].interactions[0].image_slot.is_some());
    let batch: Vec<(&PreparedHistory, Vec<&PreparedTask>)> =
        prepared.iter().map(|h| (h, h.tasks.iter().collect())).collect();
    let err = grad_check(&params, |g| batch_loss(g, &cfg, &batch), EPS).unwrap();
    (params.numel(), err)
}
