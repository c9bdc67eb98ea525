use super::network::encode_histories;
use super::train::{evaluate_loss, prepare, weighted_batch_loss, PreparedHistory, PreparedTask, Trainer};
use super::*;
use crate::cohort::{generate_cohort, CohortConfig, CountRange, GroundTruth};
use crate::interaction::Interaction;
use crate::tasks::{build_all, build_recommend, build_trace, split_history, TaskKind, TaskSet};

fn cohort(window: usize) -> (Vec<InteractionSequence>, GroundTruth) {
    generate_cohort(&CohortConfig {
        n_students: 8,
        n_concepts: 12,
        n_questions: 120,
        interactions_per_student: CountRange { min: 12, max: 16 },
        window,
        seed: 21,
        ..Default::default()
    })
    .unwrap()
}

fn corpus_tokenizer(seqs: &[InteractionSequence], tasks: &TaskSet) -> Tokenizer {
    let mut texts: Vec<String> = seqs.iter().flat_map(|s| s.interactions.iter().map(Interaction::render)).collect();
    for t in tasks.all() {
        texts.push(t.instruction_text.clone());
        texts.push(t.target_text.clone());
    }
    Tokenizer::fit(texts.iter().map(String::as_str), 4096).unwrap()
}

struct Fixture {
    histories: Vec<InteractionSequence>,
    tasks: TaskSet,
    tokenizer: Tokenizer,
}

fn fixture(window: usize) -> Fixture {
    let (seqs, truth) = cohort(window);
    let (histories, tasks) = build_all(&seqs, &truth, &[5], 1).unwrap();
    let tokenizer = corpus_tokenizer(&seqs, &tasks);
    Fixture {
        histories,
        tasks,
        tokenizer,
    }
}

fn desk(v: usize) -> ModelConfig {
    ModelConfig {
        vocab_size: v,
        image_dim: 16,
        ..Default::default()
    }
}

fn history_of(f: &Fixture, r: &crate::tasks::HistoryRef) -> InteractionSequence {
    f.histories
        .iter()
        .find(|h| h.student_id == r.student_id && h.segment_index == r.segment_index)
        .unwrap()
        .clone()
}

#[test]
fn serialization_layout_and_round_trip() {
    let f = fixture(6);
    for h in &f.histories {
        for x in &h.interactions {
            let s = serialize_interaction(&f.tokenizer, x, 10_000);
            assert_eq!(s.image_slot.is_some(), x.has_image());
            // in-vocabulary corpus: exact round trip
            assert_eq!(f.tokenizer.decode(&s.ids), x.render());
        }
    }
    let x = Interaction {
        question_text: "Look at the picture and write the equation.".into(),
        image_feature: None,
        user_answer: vec!["5".into(), "3".into()],
        knowledge_concept: "Advanced addition with carrying".into(),
        correct: true,
        response_time_s: 61,
    };
    let tok = Tokenizer::fit([x.render().as_str()], 4096).unwrap();
    let s = serialize_interaction(&tok, &x, 1000);
    assert!(s.image_slot.is_none());
    let needle = tok.encode("Response Time: 61s");
    assert!(s.ids.windows(needle.len()).any(|w| w == needle.as_slice()));
    // the cap keeps the trailing fields
    let capped = serialize_interaction(&tok, &x, 8);
    assert_eq!(capped.ids.len(), 8);
    assert_eq!(capped.ids[..], s.ids[s.ids.len() - 8..]);
}

#[test]
fn profile_shape_is_n_times_m() {
    let f = fixture(8);
    let v = f.tokenizer.vocab_size();
    let cfg = ModelConfig {
        encoder_hidden: 16,
        lm_hidden: 2048,
        lm_heads: 16,
        lm_layers: 0,
        m: 2,
        vocab_size: v,
        ..Default::default()
    };
    let model = UniModel::new(cfg, f.tokenizer.clone(), 0).unwrap();
    let seq = InteractionSequence {
        interactions: f.histories[0].interactions[..7].to_vec(),
        ..f.histories[0].clone()
    };
    let p = model.encode_profile(&seq).unwrap();
    assert_eq!(p.shape(), &[14, 2048]);
    assert!(p.all_finite());
    let empty = InteractionSequence {
        interactions: vec![],
        ..seq
    };
    assert!(model.encode_profile(&empty).is_err());
}

#[test]
fn permuting_interactions_permutes_row_blocks() {
    let f = fixture(8);
    let cfg = ModelConfig {
        m: 2,
        ..desk(f.tokenizer.vocab_size())
    };
    let mut model = UniModel::new(cfg, f.tokenizer.clone(), 4).unwrap();
    let id = model.params.id("dec.hist_pos").unwrap();
    model.params.get_mut(id).data_mut().fill(0.0);
    let seq = f.histories[0].clone();
    let mut swapped = seq.clone();
    swapped.interactions.swap(0, 2);
    let a = model.encode_profile(&seq).unwrap();
    let b = model.encode_profile(&swapped).unwrap();
    let m = 2;
    let block = |t: &Tensor<f32>, i: usize| t.data()[i * m * t.cols()..(i + 1) * m * t.cols()].to_vec();
    assert_eq!(block(&a, 0), block(&b, 2));
    assert_eq!(block(&a, 2), block(&b, 0));
    for i in 3..seq.len() {
        assert_eq!(block(&a, i), block(&b, i));
    }
}

#[test]
fn decoder_input_length_ignores_verbosity() {
    let f = fixture(8);
    for m in 1..=3 {
        let model = UniModel::new(
            ModelConfig {
                m,
                ..desk(f.tokenizer.vocab_size())
            },
            f.tokenizer.clone(),
            0,
        )
        .unwrap();
        let t = &f.tasks.trace[0];
        let seq = history_of(&f, &t.history_ref);
        let mut verbose = seq.clone();
        for x in &mut verbose.interactions {
            x.question_text = format!("{} {}", x.question_text, "and then some more words".repeat(5));
        }
        let prompt = prompt_ids(&f.tokenizer, &t.instruction_text).len();
        assert_eq!(model.decoder_input_len(&seq, t), seq.len() * m + prompt);
        assert_eq!(model.decoder_input_len(&verbose, t), seq.len() * m + prompt);
        assert_eq!(model.encode_profile(&verbose).unwrap().rows(), seq.len() * m);
    }
}

#[test]
fn fresh_loss_is_near_uniform() {
    let f = fixture(8);
    let v = f.tokenizer.vocab_size();
    let model = UniModel::new(desk(v), f.tokenizer.clone(), 2).unwrap();
    let ln_v = (v as f64).ln();
    for t in f.tasks.all().take(12) {
        let loss = model.train_loss(&history_of(&f, &t.history_ref), t).unwrap();
        assert!((loss - ln_v).abs() <= 0.15 * ln_v, "loss {loss} vs ln v {ln_v}");
    }
}

#[test]
fn target_positions_are_causal() {
    let f = fixture(8);
    let model = UniModel::new(desk(f.tokenizer.vocab_size()), f.tokenizer.clone(), 3).unwrap();
    let t = &f.tasks.timecost[0];
    let profile = model.encode_profile(&history_of(&f, &t.history_ref)).unwrap();
    let prompt = prompt_ids(&f.tokenizer, &t.instruction_text);
    let a = target_ids(&f.tokenizer, "123");
    let b = target_ids(&f.tokenizer, "129");
    let lp = model.target_log_probs(&profile, &prompt, &[a, b]).unwrap();
    // the first two digits are predicted before the differing third is seen
    assert_eq!(lp[0][..2], lp[1][..2]);
    assert_ne!(lp[0][3], lp[1][3]);
}

fn overfit(model: UniModel, hist: &InteractionSequence, task: &TaskInstance, steps: usize) -> Trainer {
    let data = prepare(&model, std::slice::from_ref(hist), [task]).unwrap();
    let cfg = TrainConfig {
        steps,
        batch_histories: 1,
        lr: 1e-3,
        warmup_steps: 10,
        ..Default::default()
    };
    let mut trainer = Trainer::new(model, cfg, data).unwrap();
    trainer.run(|_| {}).unwrap();
    trainer
}

#[test]
fn single_instance_overfit_regenerates_target() {
    let f = fixture(6);
    let t = f.tasks.answer[0].clone();
    let hist = history_of(&f, &t.history_ref);
    let model = UniModel::new(desk(f.tokenizer.vocab_size()), f.tokenizer.clone(), 5).unwrap();
    let trainer = overfit(model, &hist, &t, 300);
    let loss = trainer.model.train_loss(&hist, &t).unwrap();
    assert!(loss < 0.05, "loss after 300 steps {loss}");
    let out = trainer.model.generate(&hist, &t, 32).unwrap();
    assert_eq!(out, t.target_text);
    assert_eq!(out, trainer.model.generate(&hist, &t, 32).unwrap());
    assert_eq!(trainer.model.generate(&hist, &t, 0).unwrap(), "");

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.ckpt");
    trainer.model.save(&path, Some(&trainer.optimizer)).unwrap();
    let (back, opt) = UniModel::load(&path).unwrap();
    assert_eq!(opt.unwrap(), trainer.optimizer);
    assert_eq!(back.generate(&hist, &t, 32).unwrap(), out);
}

#[test]
fn overfit_true_trace_classifies_true() {
    let f = fixture(6);
    let (seqs, _) = cohort(6);
    let (hist, target) = seqs
        .iter()
        .filter_map(split_history)
        .find(|(_, t)| t.correct)
        .unwrap();
    let t = build_trace(&hist, &target).unwrap();
    let model = UniModel::new(desk(f.tokenizer.vocab_size()), f.tokenizer.clone(), 6).unwrap();
    let trainer = overfit(model, &hist, &t, 60);
    assert_eq!(trainer.model.classify_trace(&hist, &t).unwrap(), "[True]");
}

#[test]
fn trace_tie_goes_to_false_and_codomain_is_binary() {
    let f = fixture(6);
    let cfg = ModelConfig {
        encoder_hidden: 16,
        lm_hidden: 16,
        ..desk(f.tokenizer.vocab_size())
    };
    let mut model = UniModel::new(cfg, f.tokenizer.clone(), 1).unwrap();
    let (seqs, _) = cohort(4);
    let (h, target) = seqs.iter().filter_map(split_history).next().unwrap();
    let (h, target) = (&h, &target);
    let profile = model.encode_profile(h).unwrap();
    let mut rng = crate::seed::stream(3, "trace-codomain");
    use rand::Rng;
    for i in 0..1000 {
        let mut x = target.clone();
        x.question_text = format!("Q{} {}", rng.random_range(0..100_000), i);
        let t = build_trace(h, &x).unwrap();
        let out = model.classify_trace_from_profile(&profile, &t).unwrap();
        assert!(out == "[True]" || out == "[False]");
    }
    for name in ["dec.head.w", "dec.head.b"] {
        let id = model.params.id(name).unwrap();
        model.params.get_mut(id).data_mut().fill(0.0);
    }
    let t = build_trace(h, target).unwrap();
    assert_eq!(model.classify_trace(h, &t).unwrap(), "[False]");
}

#[test]
fn candidate_scores_match_per_candidate_forward() {
    let f = fixture(8);
    let (seqs, truth) = cohort(8);
    let model = UniModel::new(desk(f.tokenizer.vocab_size()), f.tokenizer.clone(), 8).unwrap();
    let (hist, _) = split_history(&seqs[1]).unwrap();
    let t = build_recommend(&hist, &truth, 10, 4).unwrap();
    let ranked = model.score_candidates(&hist, &t).unwrap();
    let mut names: Vec<&str> = ranked.iter().map(|(c, _)| c.as_str()).collect();
    names.sort();
    let mut expect: Vec<&str> = t.candidates.as_ref().unwrap().iter().map(String::as_str).collect();
    expect.sort();
    assert_eq!(names, expect);
    for w in ranked.windows(2) {
        assert!(w[0].1 > w[1].1 || (w[0].1 == w[1].1 && w[0].0 < w[1].0));
    }
    for (c, score) in &ranked {
        let single = TaskInstance {
            target_text: c.clone(),
            ..t.clone()
        };
        let oracle = -model.train_loss(&hist, &single).unwrap();
        assert!((oracle - score).abs() < 1e-5, "{c}: {score} vs {oracle}");
    }
    let one = TaskInstance {
        candidates: Some(vec![t.target_text.clone()]),
        ..t.clone()
    };
    assert_eq!(model.score_candidates(&hist, &one).unwrap()[0].0, t.target_text);
    let none = TaskInstance {
        candidates: Some(vec![]),
        ..t
    };
    assert!(model.score_candidates(&hist, &none).is_err());
}

#[test]
fn ties_rank_lexicographically() {
    let mut s = vec![("b".to_string(), -1.0), ("a".to_string(), -1.0), ("c".to_string(), 0.0)];
    rank_scores(&mut s);
    let names: Vec<&str> = s.iter().map(|(n, _)| n.as_str()).collect();
    assert_eq!(names, ["c", "a", "b"]);
}

#[test]
fn fixed_batch_loss_drops() {
    let f = fixture(6);
    let model = UniModel::new(desk(f.tokenizer.vocab_size()), f.tokenizer.clone(), 9).unwrap();
    let data = prepare(&model, &f.histories, f.tasks.all()).unwrap();
    let data: Vec<PreparedHistory> = data.into_iter().take(8).collect();
    let batch: Vec<(&PreparedHistory, Vec<&PreparedTask>)> =
        data.iter().map(|h| (h, h.tasks.iter().collect())).collect();
    let n: usize = batch.iter().map(|(_, t)| t.len()).sum();
    assert_eq!(n, 32);
    let before = evaluate_loss(&model, &batch).unwrap();
    let cfg = TrainConfig {
        steps: 300,
        batch_histories: 8,
        lr: 1e-3,
        warmup_steps: 10,
        seed: 1,
        ..Default::default()
    };
    let mut trainer = Trainer::new(model, cfg, data.clone()).unwrap();
    trainer.run(|_| {}).unwrap();
    let after = evaluate_loss(&trainer.model, &batch).unwrap();
    assert!(after < 0.7 * before, "{before} -> {after}");
    assert!(trainer.optimizer.current_lr() < 1e-9);
}

#[test]
fn resume_is_bit_exact() {
    let f = fixture(6);
    let make = || UniModel::new(desk(f.tokenizer.vocab_size()), f.tokenizer.clone(), 10).unwrap();
    let data = prepare(&make(), &f.histories, f.tasks.all()).unwrap();
    let cfg = TrainConfig {
        steps: 6,
        batch_histories: 2,
        seed: 3,
        warmup_steps: 2,
        ..Default::default()
    };
    let mut straight = Trainer::new(make(), cfg.clone(), data.clone()).unwrap();
    straight.run(|_| {}).unwrap();

    let mut first = Trainer::new(make(), TrainConfig { steps: 3, ..cfg.clone() }, data.clone()).unwrap();
    // same schedule as the straight run
    first.optimizer.schedule = straight.optimizer.schedule;
    first.run(|_| {}).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("mid.ckpt");
    first.model.save(&path, Some(&first.optimizer)).unwrap();
    let (model, opt) = UniModel::load(&path).unwrap();
    let mut resumed = Trainer::resume(model, opt.unwrap(), cfg, data).unwrap();
    resumed.run(|_| {}).unwrap();
    for ((_, a), (_, b)) in straight.model.params.iter().zip(resumed.model.params.iter()) {
        let x: Vec<u32> = a.data().iter().map(|v| v.to_bits()).collect();
        let y: Vec<u32> = b.data().iter().map(|v| v.to_bits()).collect();
        assert_eq!(x, y);
    }
}

#[test]
fn batched_encoding_matches_single() {
    let f = fixture(6);
    let model = UniModel::new(desk(f.tokenizer.vocab_size()), f.tokenizer.clone(), 11).unwrap();
    let a = model.serialize(&f.histories[0]);
    let b = model.serialize(&f.histories[1]);
    let mut g = crate::nn::Graph::with_params(&model.params);
    let both = encode_histories(&mut g, &model.config, &[&a, &b]).unwrap();
    let both = g.value(both).clone();
    let pa = model.encode_serialized(&a).unwrap();
    let pb = model.encode_serialized(&b).unwrap();
    let mut joined = pa.data().to_vec();
    joined.extend_from_slice(pb.data());
    for (x, y) in both.data().iter().zip(&joined) {
        assert!((x - y).abs() < 1e-5);
    }
}

#[test]
fn task_weights_scale_the_mean() {
    let f = fixture(6);
    let model = UniModel::new(desk(f.tokenizer.vocab_size()), f.tokenizer.clone(), 9).unwrap();
    let data = prepare(&model, &f.histories, f.tasks.all()).unwrap();
    let h = &data[0];
    let pick = |k: TaskKind| h.tasks.iter().find(|t| t.kind == k).unwrap();
    let (tr, tc) = (pick(TaskKind::Trace), pick(TaskKind::TimeCost));
    let lt = evaluate_loss(&model, &[(h, vec![tr])]).unwrap();
    let lc = evaluate_loss(&model, &[(h, vec![tc])]).unwrap();
    let mut g = crate::nn::Graph::with_params(&model.params);
    let batch = [(h, vec![tr, tc])];
    let w = weighted_batch_loss(&mut g, &model.config, &batch, |k| if k == TaskKind::Trace { 4.0 } else { 1.0 }).unwrap();
    let w = g.value(w).item() as f64;
    assert!((w - (4.0 * lt + lc) / 5.0).abs() < 1e-5, "{w} vs {lt} {lc}");
    let bad = TrainConfig {
        task_weights: [(TaskKind::Trace, 0.0)].into(),
        ..Default::default()
    };
    assert!(bad.validate().is_err());
}
