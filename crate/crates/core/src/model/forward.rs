//! Graph assembly for the towers and the decoder.
//!
//! Each training step binds every parameter tensor as a graph leaf once, then
//! builds per-sequence forward chains that share those leaves; backward
//! accumulates across the whole batch. Sequences are processed at their
//! padded length with [PAD] keys excluded from attention, so trailing padding
//! cannot influence any non-pad position.

use super::{Model, ModelError, Pooling, PROMPT_TABLE, TOWER_DECODER, TOWER_TITLE};
use crate::graph::{Graph, NodeId};
use crate::scalar::Scalar;
use crate::textproc::PAD;
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use std::collections::BTreeMap;

pub struct Binding(BTreeMap<String, NodeId>);

impl Binding {
    pub fn node(&self, name: &str) -> NodeId {
        *self
            .0
            .get(name)
            .unwrap_or_else(|| panic!("unbound tensor {name}"))
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &NodeId)> {
        self.0.iter()
    }
}

/// Dropout is active only in training mode; evaluation is deterministic.
pub enum Mode<'a> {
    Eval,
    Train { rng: &'a mut ChaCha8Rng },
}

pub fn bind_params<T: Scalar>(g: &mut Graph<T>, model: &Model<T>) -> Binding {
    let mut map = BTreeMap::new();
    for (name, tensor) in model.tensors.iter() {
        map.insert(name.clone(), g.leaf(tensor.clone()));
    }
    Binding(map)
}

fn maybe_dropout<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    p: f64,
    mode: &mut Mode,
) -> NodeId {
    match mode {
        Mode::Train { rng } if p > 0.0 => {
            let dim = g.value(x).dim();
            let keep = T::from_f64c(1.0 / (1.0 - p));
            let mask = Array2::from_shape_fn(dim, |_| {
                if rng.random::<f64>() < p {
                    T::zero()
                } else {
                    keep
                }
            });
            g.mul_mask(x, mask)
        }
        _ => x,
    }
}

/// Multi-head attention: queries from `q_in`, keys/values from `kv_in`,
/// `allowed[i][j]` gating which keys each query row may attend to.
fn attention<T: Scalar>(
    g: &mut Graph<T>,
    b: &Binding,
    prefix: &str,
    n_heads: usize,
    q_in: NodeId,
    kv_in: NodeId,
    allowed: &Array2<bool>,
) -> NodeId {
    let wq = g.matmul(q_in, b.node(&format!("{prefix}.wq")));
    let q = g.add_row(wq, b.node(&format!("{prefix}.bq")));
    let wk = g.matmul(kv_in, b.node(&format!("{prefix}.wk")));
    let k = g.add_row(wk, b.node(&format!("{prefix}.bk")));
    let wv = g.matmul(kv_in, b.node(&format!("{prefix}.wv")));
    let v = g.add_row(wv, b.node(&format!("{prefix}.bv")));
    let h = g.value(q).ncols();
    let dh = h / n_heads;
    let scale = T::from_f64c(1.0 / (dh as f64).sqrt());
    let mut heads = Vec::with_capacity(n_heads);
    for i in 0..n_heads {
        let qh = g.slice_cols(q, i * dh, dh);
        let kh = g.slice_cols(k, i * dh, dh);
        let vh = g.slice_cols(v, i * dh, dh);
        let scores = g.matmul_transb(qh, kh);
        let scaled = g.scale(scores, scale);
        let probs = g.masked_softmax_rows(scaled, allowed.clone());
        heads.push(g.matmul(probs, vh));
    }
    let ctx = g.concat_cols(&heads);
    let out = g.matmul(ctx, b.node(&format!("{prefix}.wo")));
    g.add_row(out, b.node(&format!("{prefix}.bo")))
}

fn layer_norm_named<T: Scalar>(
    g: &mut Graph<T>,
    b: &Binding,
    name: &str,
    x: NodeId,
) -> NodeId {
    g.layer_norm(
        x,
        b.node(&format!("{name}.g")),
        b.node(&format!("{name}.b")),
        T::from_f64c(1e-5),
    )
}

fn ffn<T: Scalar>(g: &mut Graph<T>, b: &Binding, prefix: &str, x: NodeId) -> NodeId {
    let w1 = g.matmul(x, b.node(&format!("{prefix}.w1")));
    let a = g.add_row(w1, b.node(&format!("{prefix}.b1")));
    let act = g.gelu(a);
    let w2 = g.matmul(act, b.node(&format!("{prefix}.w2")));
    g.add_row(w2, b.node(&format!("{prefix}.b2")))
}

/// Token + position embedding; continuous-prompt slot ids are served from the
/// dedicated prompt table instead of the token table.
fn embed<T: Scalar>(
    g: &mut Graph<T>,
    b: &Binding,
    model: &Model<T>,
    prefix: &str,
    ids: &[usize],
) -> NodeId {
    let n_slots = model.config.n_prompt_slots;
    let slot_lo = 5;
    let slot_hi = 5 + n_slots;
    let tok = g.embed_lookup(b.node(&format!("{prefix}.tok_emb")), ids);
    let positions: Vec<usize> = (0..ids.len()).collect();
    let pos = g.embed_lookup(b.node(&format!("{prefix}.pos_emb")), &positions);
    let has_slots = n_slots > 0 && ids.iter().any(|&i| i >= slot_lo && i < slot_hi);
    let base = if has_slots {
        let h = model.config.hidden_size;
        let mut tok_mask = Array2::ones((ids.len(), h));
        let mut slot_mask = Array2::zeros((ids.len(), h));
        let slot_rows: Vec<usize> = ids
            .iter()
            .map(|&i| {
                if i >= slot_lo && i < slot_hi {
                    i - slot_lo
                } else {
                    0
                }
            })
            .collect();
        for (p, &i) in ids.iter().enumerate() {
            if i >= slot_lo && i < slot_hi {
                tok_mask.row_mut(p).fill(T::zero());
                slot_mask.row_mut(p).fill(T::one());
            }
        }
        let tok_only = g.mul_mask(tok, tok_mask);
        let prompt = g.embed_lookup(b.node(PROMPT_TABLE), &slot_rows);
        let prompt_only = g.mul_mask(prompt, slot_mask);
        g.add(tok_only, prompt_only)
    } else {
        tok
    };
    g.add(base, pos)
}

fn check_len(ids: &[usize], max_len: usize) -> Result<(), ModelError> {
    if ids.len() > max_len {
        return Err(ModelError::SequenceTooLong {
            len: ids.len(),
            max_len,
        });
    }
    if ids.is_empty() {
        return Err(ModelError::BadInput("empty sequence".into()));
    }
    Ok(())
}

fn key_ok(ids: &[usize]) -> Vec<bool> {
    ids.iter().map(|&i| i != PAD).collect()
}

/// Per-token states of one tower over one (possibly padded) sequence: L x H.
pub fn encoder_states<T: Scalar>(
    g: &mut Graph<T>,
    b: &Binding,
    model: &Model<T>,
    tower: &str,
    ids: &[usize],
    mode: &mut Mode,
) -> Result<NodeId, ModelError> {
    check_len(ids, model.config.max_len)?;
    let prefix = model.resolve_tower(tower);
    let cfg = &model.config;
    let l = ids.len();
    let ok = key_ok(ids);
    let allowed = Array2::from_shape_fn((l, l), |(_, j)| ok[j]);
    let mut x = embed(g, b, model, &prefix, ids);
    for layer in 0..cfg.n_layers {
        let a = layer_norm_named(g, b, &format!("{prefix}.l{layer}.ln1"), x);
        let att = attention(
            g,
            b,
            &format!("{prefix}.l{layer}.attn"),
            cfg.n_heads,
            a,
            a,
            &allowed,
        );
        let att = maybe_dropout(g, att, cfg.dropout, mode);
        x = g.add(x, att);
        let f_in = layer_norm_named(g, b, &format!("{prefix}.l{layer}.ln2"), x);
        let f = ffn(g, b, &format!("{prefix}.l{layer}.ffn"), f_in);
        let f = maybe_dropout(g, f, cfg.dropout, mode);
        x = g.add(x, f);
    }
    Ok(layer_norm_named(g, b, &format!("{prefix}.lnf"), x))
}

/// Pool per-token states into one row: [CLS] position or masked mean.
pub fn pool_states<T: Scalar>(
    g: &mut Graph<T>,
    model: &Model<T>,
    states: NodeId,
    ids: &[usize],
) -> NodeId {
    match model.config.pooling {
        Pooling::Cls => g.select_row(states, 0),
        Pooling::Mean => g.mean_rows_masked(states, key_ok(ids)),
    }
}

/// Pooled embeddings for a batch of sequences: N x H, one row per sequence.
pub fn encode_batch<T: Scalar>(
    g: &mut Graph<T>,
    b: &Binding,
    model: &Model<T>,
    tower: &str,
    seqs: &[&[usize]],
    mode: &mut Mode,
) -> Result<NodeId, ModelError> {
    if seqs.is_empty() {
        return Err(ModelError::BadInput("empty batch".into()));
    }
    let mut rows = Vec::with_capacity(seqs.len());
    for ids in seqs {
        let states = encoder_states(g, b, model, tower, ids, mode)?;
        rows.push(pool_states(g, model, states, ids));
    }
    Ok(g.stack_rows(&rows))
}

/// Decoder hidden states over `input_ids` with cross-attention into
/// `enc_states` (title-tower per-token states, pre-pooling).
pub fn decoder_hidden<T: Scalar>(
    g: &mut Graph<T>,
    b: &Binding,
    model: &Model<T>,
    enc_states: NodeId,
    enc_ids: &[usize],
    input_ids: &[usize],
    mode: &mut Mode,
) -> Result<NodeId, ModelError> {
    model.require_decoder()?;
    check_len(input_ids, model.config.max_len)?;
    if g.value(enc_states).nrows() != enc_ids.len() {
        return Err(ModelError::BadInput(format!(
            "encoder states rows {} != encoder ids {}",
            g.value(enc_states).nrows(),
            enc_ids.len()
        )));
    }
    let cfg = &model.config;
    let l = input_ids.len();
    let causal = Array2::from_shape_fn((l, l), |(i, j)| j <= i);
    let enc_ok = key_ok(enc_ids);
    let cross = Array2::from_shape_fn((l, enc_ids.len()), |(_, j)| enc_ok[j]);
    let mut x = embed(g, b, model, TOWER_DECODER, input_ids);
    for layer in 0..cfg.n_layers {
        let a = layer_norm_named(g, b, &format!("decoder.l{layer}.ln1"), x);
        let att = attention(
            g,
            b,
            &format!("decoder.l{layer}.attn"),
            cfg.n_heads,
            a,
            a,
            &causal,
        );
        let att = maybe_dropout(g, att, cfg.dropout, mode);
        x = g.add(x, att);
        let xq = layer_norm_named(g, b, &format!("decoder.l{layer}.lnx"), x);
        let xatt = attention(
            g,
            b,
            &format!("decoder.l{layer}.xattn"),
            cfg.n_heads,
            xq,
            enc_states,
            &cross,
        );
        let xatt = maybe_dropout(g, xatt, cfg.dropout, mode);
        x = g.add(x, xatt);
        let f_in = layer_norm_named(g, b, &format!("decoder.l{layer}.ln2"), x);
        let f = ffn(g, b, &format!("decoder.l{layer}.ffn"), f_in);
        let f = maybe_dropout(g, f, cfg.dropout, mode);
        x = g.add(x, f);
    }
    Ok(layer_norm_named(g, b, "decoder.lnf", x))
}

/// Teacher-forced logits for a decoder target of length L: returns L-1 rows
/// where row i is the next-token distribution after consuming
/// `target_ids[0..=i]`, i.e. the prediction for target position i+1.
pub fn decoder_forward<T: Scalar>(
    g: &mut Graph<T>,
    b: &Binding,
    model: &Model<T>,
    enc_states: NodeId,
    enc_ids: &[usize],
    target_ids: &[usize],
    mode: &mut Mode,
) -> Result<NodeId, ModelError> {
    if target_ids.len() < 2 {
        return Err(ModelError::BadInput(
            "decoder target needs at least 2 tokens".into(),
        ));
    }
    let input = &target_ids[..target_ids.len() - 1];
    let hidden = decoder_hidden(g, b, model, enc_states, enc_ids, input, mode)?;
    let proj = g.matmul(hidden, b.node("decoder.out.w"));
    Ok(g.add_row(proj, b.node("decoder.out.b")))
}

/// Evaluation-mode pooled embeddings (no gradients).
pub fn encode_pooled<T: Scalar>(
    model: &Model<T>,
    tower: &str,
    seqs: &[Vec<usize>],
) -> Result<Array2<T>, ModelError> {
    let mut g = Graph::new();
    let b = bind_params(&mut g, model);
    let refs: Vec<&[usize]> = seqs.iter().map(|s| s.as_slice()).collect();
    let node = encode_batch(&mut g, &b, model, tower, &refs, &mut Mode::Eval)?;
    Ok(g.value(node).clone())
}

/// Greedy continuation after `prefix_ids`, conditioned on the title through
/// cross-attention. Stops at [SEP] (not returned) or after `max_steps`.
pub fn greedy_decode<T: Scalar>(
    model: &Model<T>,
    enc_ids: &[usize],
    prefix_ids: &[usize],
    max_steps: usize,
) -> Result<Vec<usize>, ModelError> {
    let mut current = prefix_ids.to_vec();
    let mut out = Vec::new();
    for _ in 0..max_steps {
        if current.len() >= model.config.max_len {
            break;
        }
        let mut g = Graph::new();
        let b = bind_params(&mut g, model);
        let enc = encoder_states(&mut g, &b, model, TOWER_TITLE, enc_ids, &mut Mode::Eval)?;
        let hidden = decoder_hidden(&mut g, &b, model, enc, enc_ids, &current, &mut Mode::Eval)?;
        let last = g.value(hidden).nrows() - 1;
        let row = g.select_row(hidden, last);
        let proj = g.matmul(row, b.node("decoder.out.w"));
        let logits = g.add_row(proj, b.node("decoder.out.b"));
        let lv = g.value(logits);
        let mut best = 0;
        let mut best_v = lv[(0, 0)];
        for j in 1..lv.ncols() {
            if lv[(0, j)] > best_v {
                best_v = lv[(0, j)];
                best = j;
            }
        }
        if best == crate::textproc::SEP {
            break;
        }
        out.push(best);
        current.push(best);
    }
    Ok(out)
}
