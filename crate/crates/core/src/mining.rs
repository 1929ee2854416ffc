//! Hard-negative construction: EDA-style text augmentation, semantic mining
//! of low-relevance neighbors over the vector index, and assembly of
//! training batches with a batch-shared negative pool.

use crate::corpus::{Corpus, Document, EventTriple, LabeledPair, Query, SurfacePools};
use crate::retrieval::{search_embedding, RetrievalError, VectorIndex};
use crate::scalar::Scalar;
use crate::textproc::{
    render_prompt, sequence_for_encoder, tokenize, PromptTemplate, TextError, TokenSeq, Vocab,
};
use crate::util::{read_jsonl_numbered, seeded_rng, write_jsonl, JsonlError};
use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum MiningError {
    #[error("invalid config: {0}")]
    BadConfig(String),
    #[error("cannot augment empty text")]
    EmptyText,
    #[error("empty batch")]
    EmptyBatch,
    #[error("{path}:{line}: {message}")]
    Validation {
        path: String,
        line: usize,
        message: String,
    },
    #[error("unresolvable id: {0}")]
    Unresolvable(String),
    #[error(transparent)]
    Index(#[from] RetrievalError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// EDA-style augmentation. The unit is the whitespace-separated surface word,
// so multi-character CJK entities match entity-table keys as written.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub entity_table: BTreeMap<String, Vec<String>>,
    pub p_delete: f64,
    pub p_duplicate: f64,
    pub n_swaps: usize,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            entity_table: BTreeMap::new(),
            p_delete: 0.1,
            p_duplicate: 0.1,
            n_swaps: 1,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<(), MiningError> {
        for (p, name) in [(self.p_delete, "p_delete"), (self.p_duplicate, "p_duplicate")] {
            if !(0.0..=1.0).contains(&p) {
                return Err(MiningError::BadConfig(format!(
                    "{name} must be in [0,1], got {p}"
                )));
            }
        }
        if self.p_delete + self.p_duplicate > 1.0 {
            return Err(MiningError::BadConfig(
                "p_delete + p_duplicate must not exceed 1 (one action per token)".into(),
            ));
        }
        for (k, v) in &self.entity_table {
            if v.is_empty() {
                return Err(MiningError::BadConfig(format!(
                    "entity table entry {k:?} has no replacements"
                )));
            }
        }
        Ok(())
    }
}

/// `n_variants` augmented copies of `text`. Each draw applies, in order:
/// entity replacement (one matched word swapped for a table sibling), then
/// per-word deletion or in-place duplication (never both on one word), then
/// `n_swaps` adjacent transpositions. Deterministic per (text, cfg, draw).
pub fn eda_augment(
    text: &str,
    cfg: &AugmentConfig,
    n_variants: usize,
) -> Result<Vec<String>, MiningError> {
    cfg.validate()?;
    (0..n_variants)
        .map(|draw| eda_augment_one(text, cfg, draw))
        .collect()
}

/// The single variant for a given draw index.
pub fn eda_augment_one(
    text: &str,
    cfg: &AugmentConfig,
    draw: usize,
) -> Result<String, MiningError> {
    cfg.validate()?;
    let base: Vec<&str> = text.split_whitespace().collect();
    if base.is_empty() {
        return Err(MiningError::EmptyText);
    }
    let mut rng = seeded_rng(cfg.seed, &format!("eda|{draw}|{text}"));
    let mut words: Vec<String> = base.iter().map(|w| w.to_string()).collect();

    let matches: Vec<usize> = words
        .iter()
        .enumerate()
        .filter(|(_, w)| cfg.entity_table.contains_key(*w))
        .map(|(i, _)| i)
        .collect();
    if !matches.is_empty() {
        let at = matches[rng.random_range(0..matches.len())];
        let siblings = &cfg.entity_table[&words[at]];
        words[at] = siblings[rng.random_range(0..siblings.len())].clone();
    }

    let mut edited = Vec::with_capacity(words.len());
    for w in &words {
        let u: f64 = rng.random();
        if u < cfg.p_delete {
            continue;
        }
        edited.push(w.clone());
        if u < cfg.p_delete + cfg.p_duplicate {
            edited.push(w.clone());
        }
    }
    // A fully-deleted variant is useless; fall back to the pre-deletion
    // words so every variant stays tokenizable.
    if edited.is_empty() {
        edited = words;
    }

    for _ in 0..cfg.n_swaps {
        if edited.len() >= 2 {
            let i = rng.random_range(0..edited.len() - 1);
            edited.swap(i, i + 1);
        }
    }
    Ok(edited.join(" "))
}

/// Desk-scale stand-in for an encyclopedia: each generated entity surface
/// maps to its same-entity sibling (canonical <-> alias), for subjects and
/// objects alike.
pub fn entity_table_from_pools(pools: &SurfacePools) -> BTreeMap<String, Vec<String>> {
    let mut table = BTreeMap::new();
    for s in pools.subjects.iter().chain(pools.objects.iter()) {
        table.insert(s.canonical.clone(), vec![s.alias.clone()]);
        table.insert(s.alias.clone(), vec![s.canonical.clone()]);
    }
    table
}

pub fn save_entity_table(
    table: &BTreeMap<String, Vec<String>>,
    path: &Path,
) -> Result<(), MiningError> {
    let body = serde_json::to_vec_pretty(table).expect("table serializes");
    crate::util::atomic_write(path, &body)?;
    Ok(())
}

pub fn load_entity_table(path: &Path) -> Result<BTreeMap<String, Vec<String>>, MiningError> {
    let body = std::fs::read(path)?;
    serde_json::from_slice(&body).map_err(|e| MiningError::Validation {
        path: path.display().to_string(),
        line: 0,
        message: e.to_string(),
    })
}

// ---------------------------------------------------------------------------
// Semantic mining.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningConfig {
    pub k: usize,
    pub m: usize,
    pub lower: f64,
    pub upper: f64,
    pub seed: u64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            k: 100,
            m: 5,
            lower: 0.4,
            upper: 0.8,
            seed: 0,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<(), MiningError> {
        if self.m == 0 {
            return Err(MiningError::BadConfig("m must be >= 1".into()));
        }
        if self.m * 10 > self.k {
            return Err(MiningError::BadConfig(format!(
                "m must be far below k (m <= k/10): m={}, k={}",
                self.m, self.k
            )));
        }
        if !(-1.0 <= self.lower && self.lower < self.upper && self.upper <= 1.0) {
            return Err(MiningError::BadConfig(format!(
                "need -1 <= lower < upper <= 1, got [{}, {})",
                self.lower, self.upper
            )));
        }
        Ok(())
    }
}

/// Docs labeled relevant (label 1) per query.
pub fn relevant_map(pairs: &[LabeledPair]) -> BTreeMap<String, BTreeSet<String>> {
    let mut map: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for p in pairs {
        if p.label == 1 {
            map.entry(p.query_id.clone())
                .or_default()
                .insert(p.doc_id.clone());
        }
    }
    map
}

/// Top-k neighbors of the query embedding, filtered to the cosine band
/// [lower, upper) and to docs not labeled relevant for this query, then
/// uniformly subsampled to at most m. The RNG stream is derived from
/// (seed, query_id), so mining one query is independent of batch order.
pub fn mine_semantic_negatives<T: Scalar>(
    query_id: &str,
    query_embedding: &[T],
    index: &VectorIndex<T>,
    relevant: &BTreeSet<String>,
    cfg: &MiningConfig,
) -> Result<Vec<String>, MiningError> {
    cfg.validate()?;
    let ranked = search_embedding(index, query_embedding, cfg.k)?;
    let mut survivors: Vec<String> = ranked
        .hits
        .into_iter()
        .filter(|h| cfg.lower <= h.score && h.score < cfg.upper && !relevant.contains(&h.doc_id))
        .map(|h| h.doc_id)
        .collect();
    let mut rng = seeded_rng(cfg.seed, &format!("mine|{query_id}"));
    let take = cfg.m.min(survivors.len());
    let mut picked = Vec::with_capacity(take);
    for i in 0..take {
        let j = rng.random_range(i..survivors.len());
        survivors.swap(i, j);
        picked.push(survivors[i].clone());
    }
    Ok(picked)
}

// ---------------------------------------------------------------------------
// Training examples and batch assembly.

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainExample {
    pub query_id: String,
    pub pos_doc_id: String,
    pub hard_neg_doc_ids: Vec<String>,
}

impl TrainExample {
    pub fn validate(&self) -> Result<(), String> {
        if self.hard_neg_doc_ids.iter().any(|n| *n == self.pos_doc_id) {
            return Err(format!(
                "positive {} listed among its own hard negatives",
                self.pos_doc_id
            ));
        }
        let mut seen = BTreeSet::new();
        for n in &self.hard_neg_doc_ids {
            if !seen.insert(n) {
                return Err(format!("duplicate hard negative {n}"));
            }
        }
        Ok(())
    }
}

pub fn save_examples(examples: &[TrainExample], path: &Path) -> Result<(), MiningError> {
    write_jsonl(path, examples)?;
    Ok(())
}

pub fn load_examples(path: &Path) -> Result<Vec<TrainExample>, MiningError> {
    let rows: Vec<(usize, TrainExample)> = read_jsonl_numbered(path)?;
    let mut out = Vec::with_capacity(rows.len());
    for (line, ex) in rows {
        ex.validate().map_err(|message| MiningError::Validation {
            path: path.display().to_string(),
            line,
            message,
        })?;
        out.push(ex);
    }
    Ok(out)
}

/// Lookup tables shared by every batch of one corpus/vocab/template combo.
pub struct BatchContext<'a> {
    pub vocab: &'a Vocab,
    pub template: &'a PromptTemplate,
    pub max_len: usize,
    pub n_random_negatives: usize,
    documents: BTreeMap<&'a str, &'a Document>,
    queries: BTreeMap<&'a str, &'a Query>,
    gold_events: &'a BTreeMap<String, EventTriple>,
    relevant: BTreeMap<String, BTreeSet<String>>,
    all_doc_ids: Vec<&'a str>,
    augment: Option<(&'a AugmentConfig, usize)>,
}

impl<'a> BatchContext<'a> {
    pub fn new(
        corpus: &'a Corpus,
        vocab: &'a Vocab,
        template: &'a PromptTemplate,
        max_len: usize,
        n_random_negatives: usize,
    ) -> Self {
        BatchContext {
            vocab,
            template,
            max_len,
            n_random_negatives,
            documents: corpus
                .documents
                .iter()
                .map(|d| (d.doc_id.as_str(), d))
                .collect(),
            queries: corpus
                .queries
                .iter()
                .map(|q| (q.query_id.as_str(), q))
                .collect(),
            gold_events: &corpus.gold_events,
            relevant: relevant_map(&corpus.pairs),
            all_doc_ids: corpus.documents.iter().map(|d| d.doc_id.as_str()).collect(),
            augment: None,
        }
    }

    /// Augment encoder-side texts (queries and positive titles). The draw
    /// index varies the variants across epochs; decoder targets keep the
    /// original title so the gold event still matches its surface forms.
    pub fn with_augment(mut self, cfg: &'a AugmentConfig, draw: usize) -> Self {
        self.augment = Some((cfg, draw));
        self
    }

    fn augmented(&self, text: &str) -> Result<String, MiningError> {
        match self.augment {
            Some((cfg, draw)) => eda_augment_one(text, cfg, draw),
            None => Ok(text.to_string()),
        }
    }

    pub fn relevant_for(&self, query_id: &str) -> Option<&BTreeSet<String>> {
        self.relevant.get(query_id)
    }

    pub fn document(&self, doc_id: &str) -> Result<&'a Document, MiningError> {
        self.documents
            .get(doc_id)
            .copied()
            .ok_or_else(|| MiningError::Unresolvable(format!("doc {doc_id}")))
    }

    pub fn query(&self, query_id: &str) -> Result<&'a Query, MiningError> {
        self.queries
            .get(query_id)
            .copied()
            .ok_or_else(|| MiningError::Unresolvable(format!("query {query_id}")))
    }

    /// Decoder target for a title: template + title tokens + gold event (or
    /// an all-zero mask when no gold event exists). The title is truncated to
    /// whatever the template and event leave room for.
    pub fn build_target(
        &self,
        title: &str,
        event: Option<&EventTriple>,
    ) -> Result<crate::textproc::DecoderTarget, MiningError> {
        let fixed = render_prompt(self.template, &[], event, self.vocab, self.max_len)?;
        let budget = self.max_len - fixed.input_ids.ids.len();
        let title_ids = tokenize(title, self.vocab, budget.max(1))?;
        Ok(render_prompt(
            self.template,
            &title_ids.ids,
            event,
            self.vocab,
            self.max_len,
        )?)
    }
}

/// One training batch: tokenized queries and positives, the shared negative
/// pool, per-query pool validity, and decoder targets for the positives.
pub struct TrainBatch {
    pub query_ids: Vec<String>,
    pub pos_doc_ids: Vec<String>,
    pub queries: Vec<TokenSeq>,
    pub positives: Vec<TokenSeq>,
    pub pool_doc_ids: Vec<String>,
    pub pool: Vec<TokenSeq>,
    /// `neg_valid[i][j]`: pool entry j may serve as a negative for query i
    /// (false exactly when the doc is labeled relevant for that query).
    pub neg_valid: Array2<bool>,
    pub targets: Vec<crate::textproc::DecoderTarget>,
    pub gold_events: Vec<Option<EventTriple>>,
}

/// Materialize one batch: the pool is the union of the examples' hard
/// negatives plus `n_random_negatives` randomly drawn titles, shared by all
/// queries; in-batch positives act as additional negatives through the
/// similarity matrix, not through this pool.
pub fn assemble_batch(
    examples: &[TrainExample],
    ctx: &BatchContext,
    rng: &mut ChaCha8Rng,
) -> Result<TrainBatch, MiningError> {
    if examples.is_empty() {
        return Err(MiningError::EmptyBatch);
    }
    if examples.len() < 2 {
        log::warn!("batch of {} query(ies): no in-batch negatives", examples.len());
    }
    for ex in examples {
        ex.validate().map_err(|message| MiningError::Validation {
            path: "<batch>".into(),
            line: 0,
            message,
        })?;
    }
    let mut pool_ids: Vec<String> = Vec::new();
    let mut in_pool: BTreeSet<&str> = BTreeSet::new();
    for ex in examples {
        for n in &ex.hard_neg_doc_ids {
            ctx.document(n)?;
            if in_pool.insert(n.as_str()) {
                pool_ids.push(n.clone());
            }
        }
    }
    let mut attempts = 0;
    let mut added = 0;
    while added < ctx.n_random_negatives && attempts < 20 * ctx.n_random_negatives.max(1) {
        attempts += 1;
        let pick = ctx.all_doc_ids[rng.random_range(0..ctx.all_doc_ids.len())];
        if in_pool.insert(pick) {
            pool_ids.push(pick.to_string());
            added += 1;
        }
    }

    let mut batch = TrainBatch {
        query_ids: Vec::new(),
        pos_doc_ids: Vec::new(),
        queries: Vec::new(),
        positives: Vec::new(),
        pool_doc_ids: pool_ids,
        pool: Vec::new(),
        neg_valid: Array2::from_elem((examples.len(), 0), true),
        targets: Vec::new(),
        gold_events: Vec::new(),
    };
    for ex in examples {
        let q = ctx.query(&ex.query_id)?;
        let d = ctx.document(&ex.pos_doc_id)?;
        let q_text = ctx.augmented(&q.text)?;
        let t_text = ctx.augmented(&d.title)?;
        batch
            .queries
            .push(sequence_for_encoder(&q_text, ctx.vocab, ctx.max_len)?);
        batch
            .positives
            .push(sequence_for_encoder(&t_text, ctx.vocab, ctx.max_len)?);
        let gold = ctx.gold_events.get(&ex.pos_doc_id).cloned();
        batch.targets.push(ctx.build_target(&d.title, gold.as_ref())?);
        batch.gold_events.push(gold);
        batch.query_ids.push(ex.query_id.clone());
        batch.pos_doc_ids.push(ex.pos_doc_id.clone());
    }
    let empty = BTreeSet::new();
    batch.neg_valid = Array2::from_shape_fn(
        (examples.len(), batch.pool_doc_ids.len()),
        |(i, j)| {
            let rel = ctx.relevant_for(&examples[i].query_id).unwrap_or(&empty);
            !rel.contains(&batch.pool_doc_ids[j])
        },
    );
    for (j, id) in batch.pool_doc_ids.iter().enumerate() {
        let d = ctx.document(id)?;
        batch
            .pool
            .push(sequence_for_encoder(&d.title, ctx.vocab, ctx.max_len)?);
        let _ = j;
    }
    Ok(batch)
}
