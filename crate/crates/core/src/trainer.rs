//! Training orchestration: adaptive-moment optimization over assembled
//! batches, per-epoch negative mining, event-source selection for the
//! query/event contrastive term, and the ablation and prompt-search runners.

use crate::corpus::{Corpus, Document, EventTriple};
use crate::eval::{evaluate_runs, EvalError, Qrels, Report};
use crate::losses::{
    generation_loss_node, contrastive_node, pairwise_node, total_loss_node, LossBreakdown,
    LossConfig, LossError, LossNodes,
};
use crate::mining::{
    assemble_batch, mine_semantic_negatives, relevant_map, AugmentConfig, BatchContext,
    MiningConfig, MiningError, TrainBatch, TrainExample,
};
use crate::model::forward::{
    bind_params, decoder_forward, encode_batch, encoder_states, greedy_decode, Mode,
};
use crate::model::{
    save_checkpoint, EncoderConfig, Model, ModelError, TOWER_QUERY, TOWER_TITLE,
};
use crate::retrieval::{build_index, embed_texts, search, RetrievalError};
use crate::scalar::Scalar;
use crate::textproc::{
    registry_template, sequence_for_encoder, serialize_event, PromptTemplate, TemplateElem,
    TemplateKind, TextError, Vocab, CLS, SEP,
};
use crate::util::{seeded_rng, sha256_hex};
use crate::graph::{Graph, NodeId};
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid train config: {0}")]
    BadConfig(String),
    #[error("unknown prompt template {0:?}")]
    UnknownTemplate(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Mining(#[from] MiningError),
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

// ---------------------------------------------------------------------------
// Configuration.

/// Where the event text for the query/event contrastive term comes from:
/// the labeled gold triple, or the decoder's greedy output. Gold is the
/// default; early-training decoder output is noise.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EventSource {
    Gold,
    Decoded,
}

/// Objective components. `pair` is the base relevance objective; the other
/// four are the ablatable additions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Toggles {
    pub cl: bool,
    pub pair: bool,
    pub gd: bool,
    pub gp: bool,
    pub qer: bool,
}

impl Toggles {
    pub fn all() -> Self {
        Toggles {
            cl: true,
            pair: true,
            gd: true,
            gp: true,
            qer: true,
        }
    }

    pub fn none() -> Self {
        Toggles {
            cl: false,
            pair: false,
            gd: false,
            gp: false,
            qer: false,
        }
    }

    /// Pairwise objective only.
    pub fn base() -> Self {
        Toggles {
            pair: true,
            ..Toggles::none()
        }
    }

    /// Report label: "base" plus the enabled additions, "EER" when all on.
    pub fn label(&self) -> String {
        if *self == Toggles::all() {
            return "EER".to_string();
        }
        let mut s = String::from("base");
        for (on, tag) in [
            (self.cl, "CL"),
            (self.gd, "GD"),
            (self.gp, "GP"),
            (self.qer, "QER"),
        ] {
            if on {
                s.push('+');
                s.push_str(tag);
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub toggles: Toggles,
    pub event_source: EventSource,
    pub seed: u64,
    pub loss: LossConfig,
    pub mining: MiningConfig,
    pub augment: Option<AugmentConfig>,
    /// Registry template used when `gp` is on; ignored otherwise (a minimal
    /// title-then-event layout is used for generation without prompt guide).
    pub template_id: String,
    pub n_random_negatives: usize,
    pub encoder: EncoderConfig,
    pub eval_ks: Vec<usize>,
    /// Greedy decoding budget in decoded event mode.
    pub decode_max_steps: usize,
}

impl TrainConfig {
    /// Desk-scale defaults: trains in seconds to minutes on a CPU.
    pub fn desk(encoder: EncoderConfig) -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 32,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            toggles: Toggles::all(),
            event_source: EventSource::Gold,
            seed: 0,
            loss: LossConfig::default(),
            mining: MiningConfig::default(),
            augment: None,
            template_id: crate::textproc::DEFAULT_TEMPLATE.to_string(),
            n_random_negatives: 4,
            encoder,
            eval_ks: vec![1, 10],
            decode_max_steps: 16,
        }
    }

    /// Published reference hyperparameters, recorded for documentation; the
    /// model sizes this implies are far beyond desk scale.
    pub fn paper_reference(encoder: EncoderConfig) -> Self {
        TrainConfig {
            batch_size: 256,
            learning_rate: 5e-5,
            ..TrainConfig::desk(encoder)
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::BadConfig(m));
        if self.epochs == 0 || self.batch_size == 0 {
            return bad("epochs and batch_size must be >= 1".into());
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("learning_rate must be positive, got {}", self.learning_rate));
        }
        for (v, name) in [(self.beta1, "beta1"), (self.beta2, "beta2")] {
            if !(0.0..1.0).contains(&v) {
                return bad(format!("{name} must be in [0,1), got {v}"));
            }
        }
        if !(self.eps > 0.0) {
            return bad(format!("eps must be positive, got {}", self.eps));
        }
        if self.toggles.gp && !self.toggles.gd {
            return bad("prompt guide (gp) requires the generative decoder (gd)".into());
        }
        if self.toggles.qer && self.event_source == EventSource::Decoded && !self.toggles.gd {
            return bad("qer with decoded events requires the generative decoder (gd)".into());
        }
        self.loss.validate().map_err(|e| TrainError::BadConfig(e.to_string()))?;
        self.mining.validate().map_err(|e| TrainError::BadConfig(e.to_string()))?;
        if let Some(a) = &self.augment {
            a.validate().map_err(|e| TrainError::BadConfig(e.to_string()))?;
        }
        self.encoder.validate()?;
        Ok(())
    }

    fn needs_decoder(&self) -> bool {
        self.toggles.gd || (self.toggles.qer && self.event_source == EventSource::Decoded)
    }
}

/// Stable hash of the resolved configuration, recorded in reports.
pub fn config_hash(cfg: &TrainConfig) -> String {
    sha256_hex(serde_json::to_string(cfg).expect("config serializes").as_bytes())
}

/// Decoder layout for generation without prompt guide: the title, one mask
/// marking the boundary, then the event.
fn plain_template() -> PromptTemplate {
    PromptTemplate {
        id: "plain".to_string(),
        kind: TemplateKind::Handcrafted,
        pattern: vec![TemplateElem::SlotX, TemplateElem::Mask],
        n_prompt_slots: 0,
    }
}

fn resolve_template(cfg: &TrainConfig) -> Result<PromptTemplate, TrainError> {
    if cfg.toggles.gp {
        registry_template(&cfg.template_id)
            .ok_or_else(|| TrainError::UnknownTemplate(cfg.template_id.clone()))
    } else {
        Ok(plain_template())
    }
}

// ---------------------------------------------------------------------------
// Optimizer.

/// Adaptive-moment estimation with bias correction. Moments are kept per
/// tensor name; tensors that never receive gradients are never touched.
pub struct Adam<T: Scalar> {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    t: i32,
    m: BTreeMap<String, Array2<T>>,
    v: BTreeMap<String, Array2<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64, beta1: f64, beta2: f64, eps: f64) -> Self {
        Adam {
            lr,
            beta1,
            beta2,
            eps,
            t: 0,
            m: BTreeMap::new(),
            v: BTreeMap::new(),
        }
    }

    pub fn from_config(cfg: &TrainConfig) -> Self {
        Adam::new(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    }

    pub fn step(
        &mut self,
        tensors: &mut crate::model::Tensors<T>,
        grads: &BTreeMap<String, Array2<T>>,
    ) {
        self.t += 1;
        let b1 = T::from_f64c(self.beta1);
        let b2 = T::from_f64c(self.beta2);
        let lr = T::from_f64c(self.lr);
        let eps = T::from_f64c(self.eps);
        let one = T::one();
        let bc1 = T::from_f64c(1.0 - self.beta1.powi(self.t));
        let bc2 = T::from_f64c(1.0 - self.beta2.powi(self.t));
        for (name, g) in grads {
            let p = tensors.get_mut(name);
            let m = self
                .m
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            let v = self
                .v
                .entry(name.clone())
                .or_insert_with(|| Array2::zeros(g.dim()));
            ndarray::Zip::from(p)
                .and(m)
                .and(v)
                .and(g)
                .for_each(|p, m, v, &g| {
                    *m = b1 * *m + (one - b1) * g;
                    *v = b2 * *v + (one - b2) * g * g;
                    let mhat = *m / bc1;
                    let vhat = *v / bc2;
                    *p = *p - lr * mhat / (vhat.sqrt() + eps);
                });
        }
    }
}

// ---------------------------------------------------------------------------
// One optimization step.

pub struct StepOutput<T: Scalar> {
    pub breakdown: LossBreakdown,
    pub grads: BTreeMap<String, Array2<T>>,
    /// L2 norm of the continuous-prompt table gradient, when it received one.
    pub slot_grad_norm: Option<f64>,
    /// Queries that lost their query/event term for lack of a gold event.
    pub dropped_qe: usize,
}

fn as_refs(seqs: &[crate::textproc::TokenSeq]) -> Vec<&[usize]> {
    seqs.iter().map(|s| s.ids.as_slice()).collect()
}

/// Event token sequence for the encoder: gold triples are serialized to
/// text; decoded ids are wrapped in [CLS]/[SEP] directly.
fn gold_event_seq(
    event: &EventTriple,
    vocab: &Vocab,
    max_len: usize,
) -> Result<Vec<usize>, TrainError> {
    let text = serialize_event(event)?.join(" ");
    Ok(sequence_for_encoder(&text, vocab, max_len)?.ids)
}

fn decoded_event_seq<T: Scalar>(
    model: &Model<T>,
    enc_ids: &[usize],
    target: &crate::textproc::DecoderTarget,
    max_steps: usize,
) -> Result<Vec<usize>, TrainError> {
    // The prefix is everything before the first event token; the decoder
    // continues from there.
    let cut = target
        .masked_positions()
        .next()
        .unwrap_or(target.input_ids.ids.len() - 1);
    let prefix = &target.input_ids.ids[..cut];
    let gen = greedy_decode(model, enc_ids, prefix, max_steps)?;
    let budget = model.config.max_len - 2;
    let mut ids = vec![CLS];
    ids.extend(gen.into_iter().take(budget));
    ids.push(SEP);
    Ok(ids)
}

/// Forward, total loss and gradients for one batch. Disabled toggles build
/// no graph nodes, so they contribute exactly zero loss and no gradients.
pub fn step<T: Scalar>(
    model: &Model<T>,
    batch: &TrainBatch,
    cfg: &TrainConfig,
    vocab: &Vocab,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<StepOutput<T>, TrainError> {
    let t = &cfg.toggles;
    let mut out = StepOutput {
        breakdown: LossBreakdown {
            cl_qt: 0.0,
            pair_qt: 0.0,
            gen: 0.0,
            cl_qe: 0.0,
            total: 0.0,
        },
        grads: BTreeMap::new(),
        slot_grad_norm: None,
        dropped_qe: 0,
    };
    if !(t.cl || t.pair || t.gd || t.qer) {
        return Ok(out);
    }

    let mut g: Graph<T> = Graph::new();
    let b = bind_params(&mut g, model);
    let mut mode = if model.config.dropout > 0.0 {
        Mode::Train { rng }
    } else {
        Mode::Eval
    };

    let q_emb = encode_batch(&mut g, &b, model, TOWER_QUERY, &as_refs(&batch.queries), &mut mode)?;
    let mut nodes = LossNodes::default();

    if t.cl || t.pair {
        let p_emb = encode_batch(
            &mut g,
            &b,
            model,
            TOWER_TITLE,
            &as_refs(&batch.positives),
            &mut mode,
        )?;
        let s_allpos = g.cosine_matrix(q_emb, p_emb);
        let (s_neg, neg_valid) = if batch.pool.is_empty() {
            (None, None)
        } else {
            let n_emb = encode_batch(
                &mut g,
                &b,
                model,
                TOWER_TITLE,
                &as_refs(&batch.pool),
                &mut mode,
            )?;
            (Some(g.cosine_matrix(q_emb, n_emb)), Some(&batch.neg_valid))
        };
        if t.cl {
            nodes.cl_qt = Some(contrastive_node(&mut g, s_allpos, s_neg, neg_valid, &cfg.loss)?);
        }
        if t.pair {
            nodes.pair_qt = Some(pairwise_node(&mut g, s_allpos, s_neg, neg_valid, &cfg.loss)?);
        }
    }

    if t.gd {
        let mut items: Vec<(NodeId, &crate::textproc::DecoderTarget)> = Vec::new();
        for (i, target) in batch.targets.iter().enumerate() {
            if !target.loss_mask.contains(&1) {
                continue;
            }
            let enc_ids = &batch.positives[i].ids;
            let enc = encoder_states(&mut g, &b, model, TOWER_TITLE, enc_ids, &mut mode)?;
            let logits = decoder_forward(
                &mut g,
                &b,
                model,
                enc,
                enc_ids,
                &target.input_ids.ids,
                &mut mode,
            )?;
            items.push((logits, target));
        }
        if items.is_empty() {
            log::warn!("generation loss skipped: no batch item has a gold event");
        } else {
            nodes.gen = Some(generation_loss_node(&mut g, &items, &cfg.loss)?);
        }
    }

    if t.qer {
        let mut rows: Vec<usize> = Vec::new();
        let mut event_seqs: Vec<crate::textproc::TokenSeq> = Vec::new();
        for i in 0..batch.queries.len() {
            let seq = match cfg.event_source {
                EventSource::Gold => match &batch.gold_events[i] {
                    Some(e) => Some(gold_event_seq(e, vocab, model.config.max_len)?),
                    None => None,
                },
                EventSource::Decoded => Some(decoded_event_seq(
                    model,
                    &batch.positives[i].ids,
                    &batch.targets[i],
                    cfg.decode_max_steps,
                )?),
            };
            match seq {
                Some(ids) => {
                    rows.push(i);
                    event_seqs.push(crate::textproc::TokenSeq {
                        ids,
                        truncated: false,
                    });
                }
                None => out.dropped_qe += 1,
            }
        }
        if out.dropped_qe > 0 {
            log::warn!(
                "query/event term dropped for {} of {} queries (no gold event)",
                out.dropped_qe,
                batch.queries.len()
            );
        }
        if rows.is_empty() {
            log::warn!("query/event loss skipped: no events available this batch");
        } else {
            let e_emb = encode_batch(
                &mut g,
                &b,
                model,
                TOWER_TITLE,
                &as_refs(&event_seqs),
                &mut mode,
            )?;
            let q_sub = if rows.len() == batch.queries.len() {
                q_emb
            } else {
                let picked: Vec<NodeId> =
                    rows.iter().map(|&i| g.select_row(q_emb, i)).collect();
                g.stack_rows(&picked)
            };
            let s_qe = g.cosine_matrix(q_sub, e_emb);
            nodes.cl_qe = Some(contrastive_node(&mut g, s_qe, None, None, &cfg.loss)?);
        }
    }

    let (total, breakdown) = total_loss_node(&mut g, &nodes, &cfg.loss)?;
    g.backward(total);
    for (name, &nid) in b.iter() {
        if let Some(grad) = g.grad(nid) {
            out.grads.insert(name.clone(), grad.clone());
        }
    }
    out.slot_grad_norm = out.grads.get(crate::model::PROMPT_TABLE).map(|g| {
        g.iter()
            .map(|&x| {
                let v = x.to_f64c();
                v * v
            })
            .sum::<f64>()
            .sqrt()
    });
    out.breakdown = breakdown;
    Ok(out)
}

// ---------------------------------------------------------------------------
// Training loop.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepRecord {
    pub step: usize,
    pub epoch: usize,
    #[serde(flatten)]
    pub loss: LossBreakdown,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub slot_grad_norm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// Arithmetic mean of the step breakdowns in this epoch.
    pub mean_loss: LossBreakdown,
    /// Held-out retrieval metrics, when an eval corpus was supplied.
    pub eval: Option<Report>,
    pub wall_ms: u128,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub steps: Vec<StepRecord>,
    pub epochs: Vec<EpochRecord>,
    pub wall_ms: u128,
}

pub struct TrainOutcome<T: Scalar> {
    pub model: Model<T>,
    pub log: TrainLog,
    /// Step at which a non-finite loss or gradient aborted training. The
    /// returned model is the last good state.
    pub diverged_at_step: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
}

fn mean_breakdown(records: &[StepRecord]) -> LossBreakdown {
    let n = records.len().max(1) as f64;
    let mut sum = LossBreakdown {
        cl_qt: 0.0,
        pair_qt: 0.0,
        gen: 0.0,
        cl_qe: 0.0,
        total: 0.0,
    };
    for r in records {
        sum.cl_qt += r.loss.cl_qt;
        sum.pair_qt += r.loss.pair_qt;
        sum.gen += r.loss.gen;
        sum.cl_qe += r.loss.cl_qe;
        sum.total += r.loss.total;
    }
    LossBreakdown {
        cl_qt: sum.cl_qt / n,
        pair_qt: sum.pair_qt / n,
        gen: sum.gen / n,
        cl_qe: sum.cl_qe / n,
        total: sum.total / n,
    }
}

fn finite(breakdown: &LossBreakdown) -> bool {
    breakdown.total.is_finite()
        && breakdown.cl_qt.is_finite()
        && breakdown.pair_qt.is_finite()
        && breakdown.gen.is_finite()
        && breakdown.cl_qe.is_finite()
}

fn grads_finite<T: Scalar>(grads: &BTreeMap<String, Array2<T>>) -> bool {
    grads
        .values()
        .all(|g| g.iter().all(|v| v.is_finite()))
}

/// Mining pre-pass: index all train titles with the current encoder and mine
/// per-query hard negatives; one example per positive pair.
pub fn mine_examples<T: Scalar>(
    model: &Model<T>,
    corpus: &Corpus,
    vocab: &Vocab,
    mining: &MiningConfig,
) -> Result<Vec<TrainExample>, TrainError> {
    let pack = model.export_inference();
    let index = build_index(&pack, &corpus.documents, vocab)?;
    let texts: Vec<&str> = corpus.queries.iter().map(|q| q.text.as_str()).collect();
    let q_emb = embed_texts(&pack, TOWER_QUERY, &texts, vocab)?;
    let relevant = relevant_map(&corpus.pairs);
    let empty = std::collections::BTreeSet::new();
    let mut negs_by_query: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for (i, q) in corpus.queries.iter().enumerate() {
        let emb: Vec<T> = q_emb.row(i).to_vec();
        let rel = relevant.get(&q.query_id).unwrap_or(&empty);
        let mined = mine_semantic_negatives(&q.query_id, &emb, &index, rel, mining)?;
        negs_by_query.insert(q.query_id.as_str(), mined);
    }
    let mut examples = Vec::new();
    for p in &corpus.pairs {
        if p.label != 1 {
            continue;
        }
        examples.push(TrainExample {
            query_id: p.query_id.clone(),
            pos_doc_id: p.doc_id.clone(),
            hard_neg_doc_ids: negs_by_query
                .get(p.query_id.as_str())
                .cloned()
                .unwrap_or_default(),
        });
    }
    Ok(examples)
}

/// Retrieval metrics with the no-leak protocol: only `eval_corpus` queries
/// are searched, against an index over the union of both splits' titles.
pub fn evaluate_retrieval<T: Scalar>(
    model: &Model<T>,
    train_docs: &[Document],
    eval_corpus: &Corpus,
    vocab: &Vocab,
    ks: &[usize],
) -> Result<Report, TrainError> {
    let pack = model.export_inference();
    let mut by_id: BTreeMap<&str, &Document> = BTreeMap::new();
    for d in train_docs.iter().chain(eval_corpus.documents.iter()) {
        by_id.insert(d.doc_id.as_str(), d);
    }
    let all_docs: Vec<Document> = by_id.values().map(|d| (*d).clone()).collect();
    let index = build_index(&pack, &all_docs, vocab)?;
    let k_max = ks.iter().copied().max().unwrap_or(10).max(10);
    let mut runs: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
    for q in &eval_corpus.queries {
        let ranked = search(&index, &pack, vocab, &q.text, k_max.min(index.len()))?;
        runs.insert(
            q.query_id.clone(),
            ranked.hits.into_iter().map(|h| (h.doc_id, h.score)).collect(),
        );
    }
    let qrels = Qrels::from_pairs(&eval_corpus.pairs);
    Ok(evaluate_runs(&runs, &qrels, ks)?)
}

/// Full training run. Checkpoints and logs are written under `out_dir` when
/// given; per-epoch held-out metrics are computed when `eval_corpus` is
/// given. On divergence the loop aborts and the last good state is kept
/// (and saved as the final checkpoint).
pub fn train<T: Scalar>(
    cfg: &TrainConfig,
    corpus: &Corpus,
    eval_corpus: Option<&Corpus>,
    vocab: &Vocab,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate()?;
    if cfg.encoder.vocab_size != vocab.len()
        || cfg.encoder.n_prompt_slots != vocab.n_prompt_slots()
    {
        return Err(TrainError::BadConfig(format!(
            "encoder config (vocab {}, slots {}) does not match vocabulary (vocab {}, slots {})",
            cfg.encoder.vocab_size,
            cfg.encoder.n_prompt_slots,
            vocab.len(),
            vocab.n_prompt_slots()
        )));
    }
    let template = resolve_template(cfg)?;
    let t0 = Instant::now();

    let mut encoder_cfg = cfg.encoder.clone();
    encoder_cfg.seed = cfg.seed;
    let mut model = Model::<T>::init_dual_encoder(encoder_cfg, vocab.fingerprint())?;
    if cfg.needs_decoder() {
        model.init_decoder_from_encoder();
    }
    let mut adam = Adam::from_config(cfg);
    let mut log = TrainLog::default();
    let mut diverged_at_step = None;
    let mut dropout_rng = seeded_rng(cfg.seed, "dropout");
    let mut step_no = 0usize;

    'epochs: for epoch in 0..cfg.epochs {
        let e0 = Instant::now();
        let mut mining_cfg = cfg.mining.clone();
        mining_cfg.seed = cfg
            .mining
            .seed
            .wrapping_add((epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let mut examples = mine_examples(&model, corpus, vocab, &mining_cfg)?;
        let mut shuffle_rng = seeded_rng(cfg.seed, &format!("shuffle|{epoch}"));
        for i in (1..examples.len()).rev() {
            let j = rand::Rng::random_range(&mut shuffle_rng, 0..=i);
            examples.swap(i, j);
        }
        let mut ctx = BatchContext::new(
            corpus,
            vocab,
            &template,
            cfg.encoder.max_len,
            cfg.n_random_negatives,
        );
        if let Some(aug) = &cfg.augment {
            ctx = ctx.with_augment(aug, epoch);
        }

        let epoch_start = log.steps.len();
        for (batch_no, chunk) in examples.chunks(cfg.batch_size).enumerate() {
            let mut pool_rng = seeded_rng(cfg.seed, &format!("pool|{epoch}|{batch_no}"));
            let batch = assemble_batch(chunk, &ctx, &mut pool_rng)?;
            let out = step(&model, &batch, cfg, vocab, &mut dropout_rng)?;
            if !finite(&out.breakdown) || !grads_finite(&out.grads) {
                log::error!(
                    "non-finite loss or gradient at step {step_no}; aborting with last good state"
                );
                diverged_at_step = Some(step_no);
                break 'epochs;
            }
            adam.step(&mut model.tensors, &out.grads);
            log.steps.push(StepRecord {
                step: step_no,
                epoch,
                loss: out.breakdown,
                slot_grad_norm: out.slot_grad_norm,
            });
            step_no += 1;
        }

        let eval = match eval_corpus {
            Some(ec) => Some(evaluate_retrieval(
                &model,
                &corpus.documents,
                ec,
                vocab,
                &cfg.eval_ks,
            )?),
            None => None,
        };
        log.epochs.push(EpochRecord {
            epoch,
            mean_loss: mean_breakdown(&log.steps[epoch_start..]),
            eval,
            wall_ms: e0.elapsed().as_millis(),
        });
        if let Some(dir) = out_dir {
            save_checkpoint(&model, &dir.join(format!("checkpoints/epoch-{epoch}")))?;
        }
    }

    log.wall_ms = t0.elapsed().as_millis();
    let mut checkpoint_dir = None;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let final_dir = dir.join("checkpoint-final");
        save_checkpoint(&model, &final_dir)?;
        checkpoint_dir = Some(final_dir);
        crate::util::write_jsonl(&dir.join("train_log.jsonl"), &log.steps)?;
        crate::util::write_jsonl(&dir.join("epochs.jsonl"), &log.epochs)?;
    }
    Ok(TrainOutcome {
        model,
        log,
        diverged_at_step,
        checkpoint_dir,
    })
}

// ---------------------------------------------------------------------------
// Ablation and prompt-search runners.

/// The reported component lattice: the pairwise base, then cumulative
/// additions, then everything.
pub fn ablation_lattice() -> Vec<Toggles> {
    let base = Toggles::base();
    vec![
        base,
        Toggles { cl: true, ..base },
        Toggles {
            cl: true,
            gd: true,
            ..base
        },
        Toggles {
            cl: true,
            gd: true,
            gp: true,
            ..base
        },
        Toggles {
            cl: true,
            gd: true,
            qer: true,
            ..base
        },
        Toggles::all(),
    ]
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub r_at_10: f64,
    pub mrr_at_10: f64,
    pub auc: Option<f64>,
}

impl MetricsRow {
    fn from_report(r: &Report) -> Self {
        MetricsRow {
            r_at_10: r.r_at.get(&10).copied().unwrap_or(0.0),
            mrr_at_10: r.mrr_at_10,
            auc: r.auc,
        }
    }
}

fn mean_and_std(rows: &[MetricsRow]) -> (MetricsRow, Option<MetricsRow>) {
    let n = rows.len() as f64;
    let mean = |f: &dyn Fn(&MetricsRow) -> f64| rows.iter().map(|r| f(r)).sum::<f64>() / n;
    let auc_vals: Vec<f64> = rows.iter().filter_map(|r| r.auc).collect();
    let mean_row = MetricsRow {
        r_at_10: mean(&|r| r.r_at_10),
        mrr_at_10: mean(&|r| r.mrr_at_10),
        auc: (auc_vals.len() == rows.len())
            .then(|| auc_vals.iter().sum::<f64>() / n),
    };
    if rows.len() < 2 {
        return (mean_row, None);
    }
    let std = |f: &dyn Fn(&MetricsRow) -> f64, mu: f64| {
        (rows.iter().map(|r| (f(r) - mu).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
    };
    let std_row = MetricsRow {
        r_at_10: std(&|r| r.r_at_10, mean_row.r_at_10),
        mrr_at_10: std(&|r| r.mrr_at_10, mean_row.mrr_at_10),
        auc: mean_row
            .auc
            .map(|mu| std(&|r| r.auc.unwrap_or(0.0), mu)),
    };
    (mean_row, Some(std_row))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub label: String,
    pub config_hash: String,
    pub mean: MetricsRow,
    /// Sample standard deviation across seeds; present only when seeds > 1.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub std: Option<MetricsRow>,
    pub per_seed: Vec<MetricsRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub seeds: Vec<u64>,
}

fn fmt_metric(v: f64) -> String {
    format!("{v:.4}")
}

fn fmt_auc(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), fmt_metric)
}

impl AblationReport {
    /// Aligned table shaped like the component-ablation report.
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("model\tR@10\tMRR@10\tAUC");
        let with_std = self.seeds.len() > 1;
        if with_std {
            out.push_str("\tR@10_std\tMRR@10_std\tAUC_std");
        }
        out.push_str("\tconfig_hash\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}",
                row.label,
                fmt_metric(row.mean.r_at_10),
                fmt_metric(row.mean.mrr_at_10),
                fmt_auc(row.mean.auc)
            ));
            if with_std {
                let s = row.std.as_ref();
                out.push_str(&format!(
                    "\t{}\t{}\t{}",
                    fmt_metric(s.map_or(0.0, |s| s.r_at_10)),
                    fmt_metric(s.map_or(0.0, |s| s.mrr_at_10)),
                    fmt_auc(s.and_then(|s| s.auc))
                ));
            }
            out.push_str(&format!("\t{}\n", row.config_hash));
        }
        out
    }
}

/// Train and evaluate every lattice row with the same seeds.
pub fn run_ablation_suite<T: Scalar>(
    base: &TrainConfig,
    corpus: &Corpus,
    eval_corpus: &Corpus,
    vocab: &Vocab,
    seeds: &[u64],
    out_dir: Option<&Path>,
) -> Result<AblationReport, TrainError> {
    if seeds.is_empty() {
        return Err(TrainError::BadConfig("ablation needs at least one seed".into()));
    }
    let mut rows = Vec::new();
    for toggles in ablation_lattice() {
        let mut cfg = base.clone();
        cfg.toggles = toggles;
        let mut per_seed = Vec::new();
        for &seed in seeds {
            cfg.seed = seed;
            let outcome = train::<T>(&cfg, corpus, None, vocab, None)?;
            let report = evaluate_retrieval(
                &outcome.model,
                &corpus.documents,
                eval_corpus,
                vocab,
                &cfg.eval_ks,
            )?;
            per_seed.push(MetricsRow::from_report(&report));
        }
        let (mean, std) = mean_and_std(&per_seed);
        rows.push(AblationRow {
            label: toggles.label(),
            config_hash: config_hash(&cfg),
            mean,
            std,
            per_seed,
        });
    }
    let report = AblationReport {
        rows,
        seeds: seeds.to_vec(),
    };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        crate::util::atomic_write(
            &dir.join("ablation.json"),
            &serde_json::to_vec_pretty(&report)?,
        )?;
        crate::util::atomic_write(&dir.join("ablation.tsv"), report.to_tsv().as_bytes())?;
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRow {
    pub template_id: String,
    pub kind: TemplateKind,
    pub config_hash: String,
    pub metrics: MetricsRow,
    /// Mean L2 norm of the prompt-table gradient over all steps; the probe
    /// that continuous templates actually train their slots.
    pub mean_slot_grad_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptSearchReport {
    pub rows: Vec<PromptRow>,
}

impl PromptSearchReport {
    pub fn to_tsv(&self) -> String {
        let mut out = String::from("template\tkind\tR@10\tMRR@10\tAUC\tslot_grad_norm\tconfig_hash\n");
        for row in &self.rows {
            out.push_str(&format!(
                "{}\t{:?}\t{}\t{}\t{}\t{}\t{}\n",
                row.template_id,
                row.kind,
                fmt_metric(row.metrics.r_at_10),
                fmt_metric(row.metrics.mrr_at_10),
                fmt_auc(row.metrics.auc),
                fmt_metric(row.mean_slot_grad_norm),
                row.config_hash
            ));
        }
        out
    }
}

/// One full training run per template, all with prompt-guided generation on
/// and a shared seed.
pub fn run_prompt_search<T: Scalar>(
    base: &TrainConfig,
    template_ids: &[String],
    corpus: &Corpus,
    eval_corpus: &Corpus,
    vocab: &Vocab,
    out_dir: Option<&Path>,
) -> Result<PromptSearchReport, TrainError> {
    let mut rows = Vec::new();
    for id in template_ids {
        let template =
            registry_template(id).ok_or_else(|| TrainError::UnknownTemplate(id.clone()))?;
        let mut cfg = base.clone();
        cfg.toggles.gd = true;
        cfg.toggles.gp = true;
        cfg.template_id = id.clone();
        let outcome = train::<T>(&cfg, corpus, None, vocab, None)?;
        let report = evaluate_retrieval(
            &outcome.model,
            &corpus.documents,
            eval_corpus,
            vocab,
            &cfg.eval_ks,
        )?;
        let norms: Vec<f64> = outcome
            .log
            .steps
            .iter()
            .filter_map(|s| s.slot_grad_norm)
            .collect();
        rows.push(PromptRow {
            template_id: id.clone(),
            kind: template.kind,
            config_hash: config_hash(&cfg),
            metrics: MetricsRow::from_report(&report),
            mean_slot_grad_norm: if norms.is_empty() {
                0.0
            } else {
                norms.iter().sum::<f64>() / norms.len() as f64
            },
        });
    }
    let report = PromptSearchReport { rows };
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        crate::util::atomic_write(
            &dir.join("prompt_search.json"),
            &serde_json::to_vec_pretty(&report)?,
        )?;
        crate::util::atomic_write(&dir.join("prompt_search.tsv"), report.to_tsv().as_bytes())?;
    }
    Ok(report)
}
