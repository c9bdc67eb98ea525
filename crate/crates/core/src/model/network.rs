//! Parameter layout and forward graphs of the encoder, projector and decoder.
//!
//! Everything here is generic over the scalar type so the same code runs
//! in `f32` for training and in `f64` for gradient checks.

use std::ops::Range;

use rand_distr::{Distribution, Normal};

use super::config::ModelConfig;
use super::tokenizer::{Tokenizer, IMAGE};
use crate::interaction::Interaction;
use crate::nn::{Graph, ParamStore, Scalar, Tensor, Var};
use crate::seed::stream;
use crate::{Error, Result};

const LN_EPS: f64 = 1e-5;

/// Token ids of one rendered interaction plus its image slot.
#[derive(Debug, Clone, PartialEq)]
pub struct SerializedInteraction {
    pub ids: Vec<u32>,
    /// Index into `ids` of the `<image>` token whose embedding is replaced.
    pub image_slot: Option<usize>,
    pub image_feature: Option<Vec<f64>>,
}

/// Tokenizes the rendered record, keeping the trailing `cap` tokens.
pub fn serialize_interaction(tok: &Tokenizer, x: &Interaction, cap: usize) -> SerializedInteraction {
    let mut ids = tok.encode(&x.render());
    if ids.len() > cap {
        ids.drain(..ids.len() - cap);
    }
    let image_slot = x
        .image_feature
        .as_ref()
        .and_then(|_| ids.iter().position(|&t| t == IMAGE));
    SerializedInteraction {
        image_feature: image_slot.and(x.image_feature.clone()),
        ids,
        image_slot,
    }
}

/// Per-block parameter suffixes and shapes for width `h` and FFN width `f`.
fn block_params(h: usize, f: usize) -> [(&'static str, [usize; 2], Init); 12] {
    [
        ("ln1.g", [1, h], Init::One),
        ("ln1.b", [1, h], Init::Zero),
        ("attn.qkv.w", [h, 3 * h], Init::Normal),
        ("attn.qkv.b", [1, 3 * h], Init::Zero),
        ("attn.out.w", [h, h], Init::Normal),
        ("attn.out.b", [1, h], Init::Zero),
        ("ln2.g", [1, h], Init::One),
        ("ln2.b", [1, h], Init::Zero),
        ("ffn.up.w", [h, f], Init::Normal),
        ("ffn.up.b", [1, f], Init::Zero),
        ("ffn.down.w", [f, h], Init::Normal),
        ("ffn.down.b", [1, h], Init::Zero),
    ]
}

/// Named parameter shapes in store order.
pub fn param_layout(cfg: &ModelConfig) -> Vec<(String, [usize; 2], Init)> {
    let (he, h, v) = (cfg.encoder_hidden, cfg.lm_hidden, cfg.vocab_size);
    let mut out = vec![
        ("enc.tok_emb".to_string(), [v, he], Init::Normal),
        ("enc.query".into(), [cfg.m, he], Init::Normal),
        ("enc.pos_emb".into(), [cfg.max_interaction_tokens + cfg.m, he], Init::Normal),
        ("enc.img.w".into(), [cfg.image_dim, he], Init::Normal),
        ("enc.img.b".into(), [1, he], Init::Zero),
    ];
    let stack = |out: &mut Vec<(String, [usize; 2], Init)>, prefix: &str, layers: usize, width: usize| {
        for l in 0..layers {
            for (suffix, shape, init) in block_params(width, cfg.ffn_mult * width) {
                out.push((format!("{prefix}.l{l}.{suffix}"), shape, init));
            }
        }
        out.push((format!("{prefix}.ln_f.g"), [1, width], Init::One));
        out.push((format!("{prefix}.ln_f.b"), [1, width], Init::Zero));
    };
    stack(&mut out, "enc", cfg.encoder_layers, he);
    out.push(("proj.w".into(), [he, h], Init::Normal));
    out.push(("proj.b".into(), [1, h], Init::Zero));
    out.push(("dec.hist_pos".into(), [cfg.max_history, h], Init::Normal));
    out.push(("dec.tok_emb".into(), [v, h], Init::Normal));
    out.push(("dec.pos_emb".into(), [cfg.max_text_tokens, h], Init::Normal));
    stack(&mut out, "dec", cfg.lm_layers, h);
    out.push(("dec.head.w".into(), [h, v], Init::Normal));
    out.push(("dec.head.b".into(), [1, v], Init::Zero));
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Init {
    Normal,
    Zero,
    One,
}

/// Fresh parameters: weights `N(0, init_std)`, biases zero, gains one.
/// Draws are made in `f64` so both precisions start from the same values.
pub fn init_params<T: Scalar>(cfg: &ModelConfig, seed: u64) -> Result<ParamStore<T>> {
    cfg.validate()?;
    let mut rng = stream(seed, "init");
    let normal = Normal::new(0.0, cfg.init_std).expect("validated std");
    let mut store = ParamStore::new();
    for (name, shape, init) in param_layout(cfg) {
        let n = shape[0] * shape[1];
        let data: Vec<f64> = match init {
            Init::Normal => (0..n).map(|_| normal.sample(&mut rng)).collect(),
            Init::Zero => vec![0.0; n],
            Init::One => vec![1.0; n],
        };
        store.insert(name, Tensor::from_f64(&shape, &data));
    }
    Ok(store)
}

fn layer_norm<T: Scalar>(g: &mut Graph<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    let gain = g.param_named(&format!("{prefix}.g"));
    let bias = g.param_named(&format!("{prefix}.b"));
    g.layer_norm(x, gain, bias, LN_EPS)
}

fn dense<T: Scalar>(g: &mut Graph<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    let w = g.param_named(&format!("{prefix}.w"));
    let b = g.param_named(&format!("{prefix}.b"));
    g.linear(x, w, b)
}

/// Pre-norm transformer block.
fn block<T: Scalar>(
    g: &mut Graph<'_, T>,
    prefix: &str,
    x: Var,
    heads: usize,
    segments: &[(usize, usize)],
    causal: bool,
) -> Result<Var> {
    let h = layer_norm(g, &format!("{prefix}.ln1"), x)?;
    let qkv = dense(g, &format!("{prefix}.attn.qkv"), h)?;
    let a = g.attention(qkv, heads, segments, causal)?;
    let a = dense(g, &format!("{prefix}.attn.out"), a)?;
    let x = g.add(x, a)?;
    let h = layer_norm(g, &format!("{prefix}.ln2"), x)?;
    let u = dense(g, &format!("{prefix}.ffn.up"), h)?;
    let u = g.gelu(u);
    let d = dense(g, &format!("{prefix}.ffn.down"), u)?;
    g.add(x, d)
}

fn stack<T: Scalar>(
    g: &mut Graph<'_, T>,
    prefix: &str,
    mut x: Var,
    layers: usize,
    heads: usize,
    segments: &[(usize, usize)],
    causal: bool,
) -> Result<Var> {
    for l in 0..layers {
        x = block(g, &format!("{prefix}.l{l}"), x, heads, segments, causal)?;
    }
    layer_norm(g, &format!("{prefix}.ln_f"), x)
}

/// Compressed profiles of several histories, stacked.
///
/// Every interaction is encoded on its own: its tokens followed by `m`
/// learned query rows pass through the bidirectional encoder, and the
/// final query states are projected to the decoder width. Rows are ordered
/// by (history, interaction, query); history `i` occupies rows
/// `offsets[i]..offsets[i + 1]` of the result, where each history adds
/// `len * m` rows and gets interaction-position embeddings from zero.
pub fn encode_histories<T: Scalar>(
    g: &mut Graph<'_, T>,
    cfg: &ModelConfig,
    histories: &[&[SerializedInteraction]],
) -> Result<Var> {
    let m = cfg.m;
    let v = cfg.vocab_size as u32;
    let mut ids = Vec::new();
    let mut pos = Vec::new();
    let mut segments = Vec::new();
    let mut img_rows = Vec::new();
    let mut img_feats = Vec::new();
    let mut query_rows = Vec::new();
    let mut hist_pos = Vec::new();
    for hist in histories {
        if hist.is_empty() {
            return Err(Error::Invalid("cannot encode an empty history".into()));
        }
        if hist.len() > cfg.max_history {
            return Err(Error::Invalid(format!(
                "history of {} interactions exceeds max_history {}",
                hist.len(),
                cfg.max_history
            )));
        }
        for (i, x) in hist.iter().enumerate() {
            if x.ids.len() > cfg.max_interaction_tokens {
                return Err(Error::Invalid("interaction longer than max_interaction_tokens".into()));
            }
            let start = ids.len();
            if let (Some(slot), Some(f)) = (x.image_slot, &x.image_feature) {
                if f.len() != cfg.image_dim {
                    return Err(Error::Shape {
                        op: "image_feature",
                        left: vec![f.len()],
                        right: vec![cfg.image_dim],
                    });
                }
                img_rows.push(start + slot);
                img_feats.extend_from_slice(f);
            }
            for &t in &x.ids {
                if t >= v {
                    return Err(Error::Invalid(format!("token {t} outside vocabulary of {v}")));
                }
                ids.push(t);
            }
            for q in 0..m {
                query_rows.push(ids.len());
                ids.push(v + q as u32);
                hist_pos.push(i as u32);
            }
            let len = ids.len() - start;
            pos.extend(0..len as u32);
            segments.push((start, len));
        }
    }
    if ids.is_empty() {
        return Err(Error::Invalid("cannot encode an empty batch".into()));
    }
    let tok = g.param_named("enc.tok_emb");
    let query = g.param_named("enc.query");
    let table = g.concat_rows(&[tok, query])?;
    let mut x = g.embedding(table, &ids)?;
    if !img_rows.is_empty() {
        let feats = g.constant(Tensor::from_f64(&[img_rows.len(), cfg.image_dim], &img_feats));
        let proj = dense(g, "enc.img", feats)?;
        x = g.overwrite_rows(x, proj, &img_rows)?;
    }
    let pos_table = g.param_named("enc.pos_emb");
    let p = g.embedding(pos_table, &pos)?;
    let x = g.add(x, p)?;
    let x = stack(g, "enc", x, cfg.encoder_layers, cfg.encoder_heads, &segments, false)?;
    let q = g.gather_rows(x, &query_rows)?;
    let hp = dense(g, "proj", q)?;
    let hist_table = g.param_named("dec.hist_pos");
    let hpos = g.embedding(hist_table, &hist_pos)?;
    g.add(hp, hpos)
}

/// One decoder sequence: profile rows followed by embedded text.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoderItem {
    /// Rows of the stacked profile this sequence starts with.
    pub profile: Range<usize>,
    /// Text token ids (instruction, BOS, and any target prefix).
    pub text: Vec<u32>,
    /// Text positions whose next-token logits are requested.
    pub predict: Range<usize>,
}

/// Runs the causal decoder over `[profile rows ; text]` for every item and
/// returns logits for the requested positions, stacked in item order.
pub fn decode<T: Scalar>(g: &mut Graph<'_, T>, cfg: &ModelConfig, profile: Var, items: &[DecoderItem]) -> Result<Var> {
    let n_profile = g.value(profile).rows();
    let mut text = Vec::new();
    let mut pos = Vec::new();
    let mut order = Vec::new();
    let mut segments = Vec::new();
    let mut predict_rows = Vec::new();
    for it in items {
        if it.text.is_empty() || it.text.len() > cfg.max_text_tokens {
            return Err(Error::Invalid(format!(
                "decoder text of {} tokens outside 1..={}",
                it.text.len(),
                cfg.max_text_tokens
            )));
        }
        if it.profile.end > n_profile || it.predict.end > it.text.len() {
            return Err(Error::Invalid("decoder item out of range".into()));
        }
        let start = order.len();
        order.extend(it.profile.clone());
        let text_start = order.len();
        for (j, &t) in it.text.iter().enumerate() {
            if t as usize >= cfg.vocab_size {
                return Err(Error::Invalid(format!("token {t} outside vocabulary")));
            }
            order.push(n_profile + text.len());
            text.push(t);
            pos.push(j as u32);
        }
        predict_rows.extend(it.predict.clone().map(|j| text_start + j));
        segments.push((start, order.len() - start));
    }
    let tok = g.param_named("dec.tok_emb");
    let e = g.embedding(tok, &text)?;
    let pos_table = g.param_named("dec.pos_emb");
    let p = g.embedding(pos_table, &pos)?;
    let e = g.add(e, p)?;
    let all = g.concat_rows(&[profile, e])?;
    let x = g.gather_rows(all, &order)?;
    let x = stack(g, "dec", x, cfg.lm_layers, cfg.lm_heads, &segments, true)?;
    let x = g.gather_rows(x, &predict_rows)?;
    dense(g, "dec.head", x)
}

/// Row-wise log-softmax of selected entries: `log p(targets[r] | row r)`.
pub fn target_log_probs<T: Scalar>(logits: &Tensor<T>, targets: &[u32]) -> Vec<f64> {
    targets
        .iter()
        .enumerate()
        .map(|(r, &t)| {
            let row = logits.row(r);
            let max = row.iter().map(|&x| Scalar::to_f64(x)).fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|&x| (Scalar::to_f64(x) - max).exp()).sum::<f64>().ln();
            Scalar::to_f64(row[t as usize]) - lse
        })
        .collect()
}
