//! Inference-side retrieval: an exact cosine index over title embeddings,
//! a brute-force oracle, and a BM25 lexical baseline.

use crate::corpus::Document;
use crate::model::forward::encode_pooled;
use crate::model::{Model, ModelError, TOWER_QUERY, TOWER_TITLE};
use crate::scalar::{PackedScalar, Scalar};
use crate::textproc::{sequence_for_encoder, split_tokens, TextError, Vocab};
use crate::util::atomic_write;
use ndarray::Array2;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum RetrievalError {
    #[error("empty corpus")]
    EmptyCorpus,
    #[error("k must be >= 1")]
    BadK,
    #[error("vocab fingerprint mismatch: {0}")]
    Fingerprint(String),
    #[error("index/input mismatch: {0}")]
    Mismatch(String),
    #[error("invalid BM25 parameters: {0}")]
    BadParams(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Text(#[from] TextError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Exact (flat) cosine index: one embedding row per document.
#[derive(Debug, Clone, PartialEq)]
pub struct VectorIndex<T: Scalar> {
    pub doc_ids: Vec<String>,
    pub embeddings: Array2<T>,
    pub fingerprint: String,
}

impl<T: Scalar> VectorIndex<T> {
    pub fn dim(&self) -> usize {
        self.embeddings.ncols()
    }

    pub fn len(&self) -> usize {
        self.doc_ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.doc_ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Hit {
    pub doc_id: String,
    pub score: f64,
}

/// Search result ordered by non-increasing score, ties broken by ascending
/// doc_id. `truncated` is set when the corpus had fewer than k documents.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub hits: Vec<Hit>,
    pub truncated: bool,
}

impl RankedList {
    /// Ordering and uniqueness invariant, used by tests and run validation.
    pub fn check(&self) -> Result<(), RetrievalError> {
        let mut seen = std::collections::BTreeSet::new();
        for w in self.hits.windows(2) {
            let ordered = w[0].score > w[1].score
                || (w[0].score == w[1].score && w[0].doc_id < w[1].doc_id);
            if !ordered {
                return Err(RetrievalError::Mismatch(format!(
                    "hits out of order at {} -> {}",
                    w[0].doc_id, w[1].doc_id
                )));
            }
        }
        for h in &self.hits {
            if !seen.insert(&h.doc_id) {
                return Err(RetrievalError::Mismatch(format!(
                    "duplicate doc_id {}",
                    h.doc_id
                )));
            }
        }
        Ok(())
    }
}

fn check_fingerprint<T: Scalar>(pack: &Model<T>, vocab: &Vocab) -> Result<(), RetrievalError> {
    let vf = vocab.fingerprint();
    if pack.vocab_fingerprint != vf {
        return Err(RetrievalError::Fingerprint(format!(
            "model built for {}, vocab is {}",
            pack.vocab_fingerprint, vf
        )));
    }
    Ok(())
}

const EMBED_CHUNK: usize = 64;

pub fn embed_texts<T: Scalar>(
    pack: &Model<T>,
    tower: &str,
    texts: &[&str],
    vocab: &Vocab,
) -> Result<Array2<T>, RetrievalError> {
    let mut out = Array2::zeros((texts.len(), pack.config.hidden_size));
    let mut at = 0;
    for chunk in texts.chunks(EMBED_CHUNK) {
        let mut seqs = Vec::with_capacity(chunk.len());
        for text in chunk {
            seqs.push(sequence_for_encoder(text, vocab, pack.config.max_len)?.ids);
        }
        let embs = encode_pooled(pack, tower, &seqs)?;
        for row in embs.outer_iter() {
            out.row_mut(at).assign(&row);
            at += 1;
        }
    }
    Ok(out)
}

/// Embed every title with the title tower (evaluation mode) and record the
/// vocabulary fingerprint the pack was trained with.
pub fn build_index<T: Scalar>(
    pack: &Model<T>,
    documents: &[Document],
    vocab: &Vocab,
) -> Result<VectorIndex<T>, RetrievalError> {
    check_fingerprint(pack, vocab)?;
    if documents.is_empty() {
        return Err(RetrievalError::EmptyCorpus);
    }
    let titles: Vec<&str> = documents.iter().map(|d| d.title.as_str()).collect();
    let embeddings = embed_texts(pack, TOWER_TITLE, &titles, vocab)?;
    Ok(VectorIndex {
        doc_ids: documents.iter().map(|d| d.doc_id.clone()).collect(),
        embeddings,
        fingerprint: pack.vocab_fingerprint.clone(),
    })
}

fn cosine_f64<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let mut dot = 0.0f64;
    let mut na = 0.0f64;
    let mut nb = 0.0f64;
    for (x, y) in a.iter().zip(b) {
        let (x, y) = (x.to_f64c(), y.to_f64c());
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    dot / (na.sqrt().max(1e-30) * nb.sqrt().max(1e-30))
}

/// Top-k over the index for an already-computed query embedding.
pub fn search_embedding<T: Scalar>(
    index: &VectorIndex<T>,
    query_embedding: &[T],
    k: usize,
) -> Result<RankedList, RetrievalError> {
    if k == 0 {
        return Err(RetrievalError::BadK);
    }
    if query_embedding.len() != index.dim() {
        return Err(RetrievalError::Mismatch(format!(
            "query dim {} != index dim {}",
            query_embedding.len(),
            index.dim()
        )));
    }
    let mut hits: Vec<Hit> = index
        .doc_ids
        .iter()
        .zip(index.embeddings.outer_iter())
        .map(|(id, row)| Hit {
            doc_id: id.clone(),
            score: cosine_f64(query_embedding, row.as_slice().unwrap()),
        })
        .collect();
    hits.sort_by(|a, b| {
        b.score
            .partial_cmp(&a.score)
            .unwrap()
            .then_with(|| a.doc_id.cmp(&b.doc_id))
    });
    let truncated = k > hits.len();
    hits.truncate(k);
    Ok(RankedList { hits, truncated })
}

/// Embed the query text with the query tower, then score against the index.
pub fn search<T: Scalar>(
    index: &VectorIndex<T>,
    pack: &Model<T>,
    vocab: &Vocab,
    query_text: &str,
    k: usize,
) -> Result<RankedList, RetrievalError> {
    check_fingerprint(pack, vocab)?;
    if index.fingerprint != pack.vocab_fingerprint {
        return Err(RetrievalError::Fingerprint(
            "index was built with a different vocabulary".into(),
        ));
    }
    let emb = embed_texts(pack, TOWER_QUERY, &[query_text], vocab)?;
    search_embedding(index, emb.row(0).as_slice().unwrap(), k)
}

/// Independent full-scan oracle: re-embeds every title per call and selects
/// the top k by repeated scans instead of a sort. Test-only by intent.
pub fn brute_force_search<T: Scalar>(
    pack: &Model<T>,
    documents: &[Document],
    vocab: &Vocab,
    query_text: &str,
    k: usize,
) -> Result<RankedList, RetrievalError> {
    check_fingerprint(pack, vocab)?;
    if documents.is_empty() {
        return Err(RetrievalError::EmptyCorpus);
    }
    if k == 0 {
        return Err(RetrievalError::BadK);
    }
    let q = embed_texts(pack, TOWER_QUERY, &[query_text], vocab)?;
    let q = q.row(0);
    let mut scored: Vec<Hit> = Vec::with_capacity(documents.len());
    for d in documents {
        let e = embed_texts(pack, TOWER_TITLE, &[d.title.as_str()], vocab)?;
        scored.push(Hit {
            doc_id: d.doc_id.clone(),
            score: cosine_f64(q.as_slice().unwrap(), e.row(0).as_slice().unwrap()),
        });
    }
    let mut remaining = scored;
    let mut hits = Vec::new();
    while hits.len() < k && !remaining.is_empty() {
        let mut best = 0;
        for i in 1..remaining.len() {
            let better = remaining[i].score > remaining[best].score
                || (remaining[i].score == remaining[best].score
                    && remaining[i].doc_id < remaining[best].doc_id);
            if better {
                best = i;
            }
        }
        hits.push(remaining.swap_remove(best));
    }
    let truncated = k > hits.len();
    Ok(RankedList { hits, truncated })
}

// ---------------------------------------------------------------------------
// Index persistence: same manifest + little-endian blob convention as model
// checkpoints.

#[derive(Serialize, Deserialize)]
struct IndexManifest {
    format_version: u32,
    dtype: String,
    dim: usize,
    fingerprint: String,
    doc_ids: Vec<String>,
}

pub fn save_index<T: Scalar>(index: &VectorIndex<T>, dir: &Path) -> Result<(), RetrievalError> {
    std::fs::create_dir_all(dir)?;
    let manifest = IndexManifest {
        format_version: 1,
        dtype: <T as PackedScalar>::DTYPE.to_string(),
        dim: index.dim(),
        fingerprint: index.fingerprint.clone(),
        doc_ids: index.doc_ids.clone(),
    };
    let mut blob = Vec::with_capacity(index.embeddings.len() * <T as PackedScalar>::WIDTH);
    for v in index.embeddings.iter() {
        v.write_le(&mut blob);
    }
    atomic_write(
        &dir.join("index.manifest.json"),
        &serde_json::to_vec_pretty(&manifest)?,
    )?;
    atomic_write(&dir.join("index.bin"), &blob)?;
    Ok(())
}

pub fn load_index<T: Scalar>(dir: &Path) -> Result<VectorIndex<T>, RetrievalError> {
    let manifest: IndexManifest =
        serde_json::from_slice(&std::fs::read(dir.join("index.manifest.json"))?)?;
    if manifest.format_version != 1 {
        return Err(RetrievalError::Mismatch(format!(
            "unsupported index format_version {}",
            manifest.format_version
        )));
    }
    if manifest.dtype != <T as PackedScalar>::DTYPE {
        return Err(RetrievalError::Mismatch(format!(
            "index dtype {} does not match loader {}",
            manifest.dtype,
            <T as PackedScalar>::DTYPE
        )));
    }
    let blob = std::fs::read(dir.join("index.bin"))?;
    let width = <T as PackedScalar>::WIDTH;
    let n = manifest.doc_ids.len() * manifest.dim;
    if blob.len() != n * width {
        return Err(RetrievalError::Mismatch(format!(
            "index.bin holds {} bytes, expected {}",
            blob.len(),
            n * width
        )));
    }
    let mut data = Vec::with_capacity(n);
    for i in 0..n {
        data.push(T::read_le(&blob[i * width..(i + 1) * width]));
    }
    let embeddings = Array2::from_shape_vec((manifest.doc_ids.len(), manifest.dim), data)
        .map_err(|e| RetrievalError::Mismatch(e.to_string()))?;
    Ok(VectorIndex {
        doc_ids: manifest.doc_ids,
        embeddings,
        fingerprint: manifest.fingerprint,
    })
}

// ---------------------------------------------------------------------------
// BM25 lexical baseline over the same tokenizer as the dense pipeline.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bm25Params {
    pub k1: f64,
    pub b: f64,
}

impl Default for Bm25Params {
    fn default() -> Self {
        Bm25Params { k1: 1.2, b: 0.75 }
    }
}

impl Bm25Params {
    pub fn validate(&self) -> Result<(), RetrievalError> {
        if !(self.k1 > 0.0) {
            return Err(RetrievalError::BadParams(format!("k1 must be > 0, got {}", self.k1)));
        }
        if !(0.0..=1.0).contains(&self.b) {
            return Err(RetrievalError::BadParams(format!("b must be in [0,1], got {}", self.b)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Bm25Index {
    pub params: Bm25Params,
    doc_ids: Vec<String>,
    term_freqs: Vec<BTreeMap<String, usize>>,
    doc_len: Vec<usize>,
    avg_len: f64,
    doc_freq: BTreeMap<String, usize>,
}

pub fn build_bm25(documents: &[Document], params: Bm25Params) -> Result<Bm25Index, RetrievalError> {
    params.validate()?;
    if documents.is_empty() {
        return Err(RetrievalError::EmptyCorpus);
    }
    let mut term_freqs = Vec::with_capacity(documents.len());
    let mut doc_len = Vec::with_capacity(documents.len());
    let mut doc_freq: BTreeMap<String, usize> = BTreeMap::new();
    for d in documents {
        let tokens = split_tokens(&d.title);
        let mut tf: BTreeMap<String, usize> = BTreeMap::new();
        for t in &tokens {
            *tf.entry(t.clone()).or_insert(0) += 1;
        }
        for t in tf.keys() {
            *doc_freq.entry(t.clone()).or_insert(0) += 1;
        }
        doc_len.push(tokens.len());
        term_freqs.push(tf);
    }
    let avg_len = doc_len.iter().sum::<usize>() as f64 / doc_len.len() as f64;
    Ok(Bm25Index {
        params,
        doc_ids: documents.iter().map(|d| d.doc_id.clone()).collect(),
        term_freqs,
        doc_len,
        avg_len,
        doc_freq,
    })
}

impl Bm25Index {
    pub fn idf(&self, term: &str) -> f64 {
        let n = self.doc_ids.len() as f64;
        let df = self.doc_freq.get(term).copied().unwrap_or(0) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }

    /// Standard BM25 over distinct query terms, same tie rule as dense search.
    pub fn rank(&self, query_text: &str, k: usize) -> Result<RankedList, RetrievalError> {
        if k == 0 {
            return Err(RetrievalError::BadK);
        }
        let terms: std::collections::BTreeSet<String> =
            split_tokens(query_text).into_iter().collect();
        let Bm25Params { k1, b } = self.params;
        let mut hits: Vec<Hit> = Vec::with_capacity(self.doc_ids.len());
        for (i, id) in self.doc_ids.iter().enumerate() {
            let len_norm = 1.0 - b + b * self.doc_len[i] as f64 / self.avg_len;
            let mut score = 0.0;
            for t in &terms {
                let tf = self.term_freqs[i].get(t).copied().unwrap_or(0) as f64;
                if tf > 0.0 {
                    score += self.idf(t) * tf * (k1 + 1.0) / (tf + k1 * len_norm);
                }
            }
            hits.push(Hit {
                doc_id: id.clone(),
                score,
            });
        }
        hits.sort_by(|a, b| {
            b.score
                .partial_cmp(&a.score)
                .unwrap()
                .then_with(|| a.doc_id.cmp(&b.doc_id))
        });
        let truncated = k > hits.len();
        hits.truncate(k);
        Ok(RankedList { hits, truncated })
    }
}
