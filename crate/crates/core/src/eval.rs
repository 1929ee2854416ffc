//! Ranking metrics (hit-based recall, MRR, AUC), TREC-style run files,
//! relevance judgments and embedding export.

use crate::corpus::LabeledPair;
use crate::model::Model;
use crate::retrieval::{embed_texts, RankedList, RetrievalError};
use crate::scalar::Scalar;
use crate::textproc::Vocab;
use crate::util::atomic_write;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("AUC undefined: no positive examples")]
    NoPositives,
    #[error("AUC undefined: no negative examples")]
    NoNegatives,
    #[error("{path}:{line}: {message}")]
    BadFile {
        path: String,
        line: usize,
        message: String,
    },
    #[error(transparent)]
    Retrieval(#[from] RetrievalError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn bad(path: &Path, line: usize, message: impl Into<String>) -> EvalError {
    EvalError::BadFile {
        path: path.display().to_string(),
        line,
        message: message.into(),
    }
}

// ---------------------------------------------------------------------------
// Relevance judgments.

/// Per-query judged documents: label 1 (relevant) and label 0 (judged
/// negative). Queries appear in `relevant` only with non-empty sets.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Qrels {
    relevant: BTreeMap<String, BTreeSet<String>>,
    judged_negative: BTreeMap<String, BTreeSet<String>>,
}

impl Qrels {
    pub fn from_pairs(pairs: &[LabeledPair]) -> Qrels {
        let mut q = Qrels::default();
        for p in pairs {
            let side = if p.label == 1 {
                &mut q.relevant
            } else {
                &mut q.judged_negative
            };
            side.entry(p.query_id.clone())
                .or_default()
                .insert(p.doc_id.clone());
        }
        q
    }

    pub fn relevant(&self, query_id: &str) -> Option<&BTreeSet<String>> {
        self.relevant.get(query_id)
    }

    pub fn judged_negative(&self, query_id: &str) -> Option<&BTreeSet<String>> {
        self.judged_negative.get(query_id)
    }

    /// Queries with at least one relevant document; the evaluated set.
    pub fn query_ids(&self) -> impl Iterator<Item = &String> {
        self.relevant.keys()
    }

    pub fn n_queries(&self) -> usize {
        self.relevant.len()
    }

    /// TSV rows `query_id<TAB>doc_id<TAB>label`, label 0 or 1.
    pub fn load(path: &Path) -> Result<Qrels, EvalError> {
        let body = std::fs::read_to_string(path)?;
        let mut q = Qrels::default();
        for (i, raw) in body.lines().enumerate() {
            let line = i + 1;
            if raw.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = raw.split('\t').collect();
            if cols.len() != 3 {
                return Err(bad(path, line, format!("expected 3 columns, got {}", cols.len())));
            }
            let label: u8 = cols[2]
                .parse()
                .ok()
                .filter(|l| *l <= 1)
                .ok_or_else(|| bad(path, line, format!("label must be 0 or 1, got {:?}", cols[2])))?;
            let (qid, did) = (cols[0].to_string(), cols[1].to_string());
            let other = if label == 1 {
                &q.judged_negative
            } else {
                &q.relevant
            };
            if other.get(&qid).is_some_and(|s: &BTreeSet<String>| s.contains(&did)) {
                return Err(bad(path, line, format!("conflicting labels for ({qid}, {did})")));
            }
            let side = if label == 1 {
                &mut q.relevant
            } else {
                &mut q.judged_negative
            };
            side.entry(qid).or_default().insert(did);
        }
        Ok(q)
    }

    pub fn save(&self, path: &Path) -> Result<(), EvalError> {
        let mut out = String::new();
        for (qid, docs) in &self.relevant {
            for d in docs {
                out.push_str(&format!("{qid}\t{d}\t1\n"));
            }
        }
        for (qid, docs) in &self.judged_negative {
            for d in docs {
                out.push_str(&format!("{qid}\t{d}\t0\n"));
            }
        }
        atomic_write(path, out.as_bytes())?;
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Per-query metrics.

/// 1.0 when any relevant document appears in the top k, else 0.0.
pub fn recall_at_k(ranked: &RankedList, relevant: &BTreeSet<String>, k: usize) -> f64 {
    let hit = ranked
        .hits
        .iter()
        .take(k)
        .any(|h| relevant.contains(&h.doc_id));
    if hit {
        1.0
    } else {
        0.0
    }
}

/// 1/rank of the first relevant document within the top k, else 0.0.
pub fn mrr_at_k(ranked: &RankedList, relevant: &BTreeSet<String>, k: usize) -> f64 {
    ranked
        .hits
        .iter()
        .take(k)
        .position(|h| relevant.contains(&h.doc_id))
        .map_or(0.0, |p| 1.0 / (p + 1) as f64)
}

/// Probability that a uniformly random positive scores above a uniformly
/// random negative, ties counted half. Rank-sum formulation; exact for the
/// half-integer counts involved.
pub fn auc(scored: &[(f64, u8)]) -> Result<f64, EvalError> {
    let p = scored.iter().filter(|(_, l)| *l == 1).count();
    let n = scored.len() - p;
    if p == 0 {
        return Err(EvalError::NoPositives);
    }
    if n == 0 {
        return Err(EvalError::NoNegatives);
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| scored[a].0.partial_cmp(&scored[b].0).expect("finite scores"));
    let mut pos_rank_sum = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j < order.len() && scored[order[j]].0 == scored[order[i]].0 {
            j += 1;
        }
        // Tie group occupies 1-based ranks i+1..=j; each member gets the mean.
        let avg_rank = (i + 1 + j) as f64 / 2.0;
        for &idx in &order[i..j] {
            if scored[idx].1 == 1 {
                pos_rank_sum += avg_rank;
            }
        }
        i = j;
    }
    Ok((pos_rank_sum - (p * (p + 1)) as f64 / 2.0) / (p * n) as f64)
}

// ---------------------------------------------------------------------------
// Run files: TREC-style TSV `query_id<TAB>doc_id<TAB>rank<TAB>score`.

pub fn write_run(runs: &BTreeMap<String, RankedList>, path: &Path) -> Result<(), EvalError> {
    let mut out = String::new();
    for (qid, ranked) in runs {
        for (i, h) in ranked.hits.iter().enumerate() {
            out.push_str(&format!("{qid}\t{}\t{}\t{}\n", h.doc_id, i + 1, h.score));
        }
    }
    atomic_write(path, out.as_bytes())?;
    Ok(())
}

/// Parse and validate a run: per query, ranks count 1,2,... in file order,
/// scores are finite and non-increasing, and no document repeats.
pub fn read_run(path: &Path) -> Result<BTreeMap<String, Vec<(String, f64)>>, EvalError> {
    let body = std::fs::read_to_string(path)?;
    let mut runs: BTreeMap<String, Vec<(String, f64)>> = BTreeMap::new();
    let mut seen: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
    for (i, raw) in body.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let cols: Vec<&str> = raw.split('\t').collect();
        if cols.len() != 4 {
            return Err(bad(path, line, format!("expected 4 columns, got {}", cols.len())));
        }
        let rank: usize = cols[2]
            .parse()
            .map_err(|_| bad(path, line, format!("bad rank {:?}", cols[2])))?;
        let score: f64 = cols[3]
            .parse()
            .ok()
            .filter(|s: &f64| s.is_finite())
            .ok_or_else(|| bad(path, line, format!("bad score {:?}", cols[3])))?;
        let rows = runs.entry(cols[0].to_string()).or_default();
        if rank != rows.len() + 1 {
            return Err(bad(
                path,
                line,
                format!("rank {rank} out of order, expected {}", rows.len() + 1),
            ));
        }
        if let Some((_, prev)) = rows.last() {
            if score > *prev {
                return Err(bad(path, line, format!("score {score} increases over {prev}")));
            }
        }
        if !seen
            .entry(cols[0].to_string())
            .or_default()
            .insert(cols[1].to_string())
        {
            return Err(bad(path, line, format!("duplicate document {:?}", cols[1])));
        }
        rows.push((cols[1].to_string(), score));
    }
    Ok(runs)
}

// ---------------------------------------------------------------------------
// Corpus-level evaluation.

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    /// Mean hit rate per cutoff, keyed by k.
    pub r_at: BTreeMap<usize, f64>,
    pub mrr_at_10: f64,
    /// None when the labeled pairs give no positives or no negatives.
    pub auc: Option<f64>,
    pub n_queries: usize,
    pub config_hash: String,
}

impl Report {
    pub fn check(&self) -> Result<(), String> {
        for (k, v) in &self.r_at {
            if !(0.0..=1.0).contains(v) {
                return Err(format!("R@{k} = {v} outside [0,1]"));
            }
        }
        if !(0.0..=1.0).contains(&self.mrr_at_10) {
            return Err(format!("MRR@10 = {} outside [0,1]", self.mrr_at_10));
        }
        if let Some(a) = self.auc {
            if !(0.0..=1.0).contains(&a) {
                return Err(format!("AUC = {a} outside [0,1]"));
            }
        }
        Ok(())
    }
}

fn ranked_from_rows(rows: &[(String, f64)]) -> RankedList {
    RankedList {
        hits: rows
            .iter()
            .map(|(d, s)| crate::retrieval::Hit {
                doc_id: d.clone(),
                score: *s,
            })
            .collect(),
        truncated: false,
    }
}

/// Metrics over every qrels query with relevant documents; queries missing
/// from the run score zero. AUC pools the retrieved judged documents of all
/// queries and is None when either label side is absent from the run.
pub fn evaluate_runs(
    runs: &BTreeMap<String, Vec<(String, f64)>>,
    qrels: &Qrels,
    ks: &[usize],
) -> Result<Report, EvalError> {
    let empty: Vec<(String, f64)> = Vec::new();
    let mut r_sum: BTreeMap<usize, f64> = ks.iter().map(|&k| (k, 0.0)).collect();
    let mut mrr_sum = 0.0;
    let mut scored: Vec<(f64, u8)> = Vec::new();
    for qid in qrels.query_ids() {
        let rows = runs.get(qid).unwrap_or(&empty);
        let ranked = ranked_from_rows(rows);
        let relevant = &qrels.relevant[qid];
        for &k in ks {
            *r_sum.get_mut(&k).expect("preseeded") += recall_at_k(&ranked, relevant, k);
        }
        mrr_sum += mrr_at_k(&ranked, relevant, 10);
        let negs = qrels.judged_negative(qid);
        for (doc, score) in rows {
            if relevant.contains(doc) {
                scored.push((*score, 1));
            } else if negs.is_some_and(|s| s.contains(doc)) {
                scored.push((*score, 0));
            }
        }
    }
    let nq = qrels.n_queries().max(1) as f64;
    let report = Report {
        r_at: r_sum.into_iter().map(|(k, s)| (k, s / nq)).collect(),
        mrr_at_10: mrr_sum / nq,
        auc: match auc(&scored) {
            Ok(a) => Some(a),
            Err(EvalError::NoPositives) | Err(EvalError::NoNegatives) => None,
            Err(e) => return Err(e),
        },
        n_queries: qrels.n_queries(),
        config_hash: String::new(),
    };
    report.check().map_err(|m| EvalError::BadFile {
        path: "<report>".into(),
        line: 0,
        message: m,
    })?;
    Ok(report)
}

pub fn evaluate_run(run_path: &Path, qrels: &Qrels, ks: &[usize]) -> Result<Report, EvalError> {
    let runs = read_run(run_path)?;
    evaluate_runs(&runs, qrels, ks)
}

/// One TSV row per input: id, then the embedding components. Returns the
/// row count written.
pub fn export_embeddings<T: Scalar>(
    pack: &Model<T>,
    tower: &str,
    items: &[(String, String)],
    vocab: &Vocab,
    path: &Path,
) -> Result<usize, EvalError> {
    let texts: Vec<&str> = items.iter().map(|(_, t)| t.as_str()).collect();
    let emb = embed_texts(pack, tower, &texts, vocab)?;
    let mut out = String::new();
    for (i, (id, _)) in items.iter().enumerate() {
        out.push_str(id);
        for v in emb.row(i) {
            out.push_str(&format!("\t{}", v.to_f64c()));
        }
        out.push('\n');
    }
    atomic_write(path, out.as_bytes())?;
    Ok(items.len())
}
