//! Synthetic real-time-search corpus.
//!
//! Queries are terse (2-3 tokens), titles are verbose and noisy (source
//! prefixes, trailing clauses, hashtags). Relevance is defined by a shared
//! latent event, so ground truth is exact. Subjects and objects each have a
//! canonical surface and a fused alias surface (`baku` / `bakuinc`); the
//! synonym-swap knob mixes them so that query and title often disagree
//! lexically while describing the same event. That gap is what a learned
//! encoder can close and a term-matching baseline cannot.

use crate::util::{read_jsonl_numbered, seeded_rng, write_jsonl, JsonlError};
use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, HashSet};
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EventTriple {
    pub subject: String,
    pub trigger: String,
    pub object: String,
}

impl EventTriple {
    pub fn new(
        subject: impl Into<String>,
        trigger: impl Into<String>,
        object: impl Into<String>,
    ) -> Self {
        EventTriple {
            subject: subject.into(),
            trigger: trigger.into(),
            object: object.into(),
        }
    }

    pub fn is_complete(&self) -> bool {
        !self.subject.trim().is_empty()
            && !self.trigger.trim().is_empty()
            && !self.object.trim().is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Document {
    pub doc_id: String,
    pub title: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Query {
    pub query_id: String,
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub event_id: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LabeledPair {
    pub query_id: String,
    pub doc_id: String,
    pub label: u8,
}

/// Knobs for the generator. Rates are probabilities in `[0,1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorSpec {
    pub n_events: usize,
    pub entity_pool: usize,
    pub verb_pool: usize,
    pub object_pool: usize,
    pub queries_per_event: usize,
    pub titles_per_event: usize,
    pub hashtag_rate: f64,
    pub prefix_rate: f64,
    pub trailing_rate: f64,
    pub subject_drop_rate: f64,
    pub synonym_swap_rate: f64,
    pub negatives_per_positive: usize,
    pub seed: u64,
}

impl Default for GeneratorSpec {
    fn default() -> Self {
        GeneratorSpec {
            n_events: 200,
            entity_pool: 40,
            verb_pool: 16,
            object_pool: 40,
            queries_per_event: 2,
            titles_per_event: 3,
            hashtag_rate: 0.5,
            prefix_rate: 0.4,
            trailing_rate: 0.3,
            subject_drop_rate: 0.5,
            synonym_swap_rate: 0.35,
            negatives_per_positive: 3,
            seed: 0,
        }
    }
}

impl GeneratorSpec {
    pub fn validate(&self) -> Result<(), CorpusError> {
        let counts = [
            ("n_events", self.n_events),
            ("entity_pool", self.entity_pool),
            ("verb_pool", self.verb_pool),
            ("object_pool", self.object_pool),
            ("queries_per_event", self.queries_per_event),
            ("titles_per_event", self.titles_per_event),
        ];
        for (name, v) in counts {
            if v == 0 {
                return Err(CorpusError::InvalidSpec(format!("{name} must be >= 1")));
            }
        }
        for (name, v) in [
            ("entity_pool", self.entity_pool),
            ("verb_pool", self.verb_pool),
            ("object_pool", self.object_pool),
        ] {
            if v > 10_000 {
                return Err(CorpusError::InvalidSpec(format!("{name} exceeds 10000")));
            }
        }
        let rates = [
            ("hashtag_rate", self.hashtag_rate),
            ("prefix_rate", self.prefix_rate),
            ("trailing_rate", self.trailing_rate),
            ("subject_drop_rate", self.subject_drop_rate),
            ("synonym_swap_rate", self.synonym_swap_rate),
        ];
        for (name, r) in rates {
            if !(0.0..=1.0).contains(&r) {
                return Err(CorpusError::InvalidSpec(format!("{name} must be in [0,1]")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub documents: Vec<Document>,
    pub queries: Vec<Query>,
    pub pairs: Vec<LabeledPair>,
    /// Generator-known provenance: doc_id -> triple used to render the title.
    pub gold_events: BTreeMap<String, EventTriple>,
}

#[derive(Debug, thiserror::Error)]
pub enum CorpusError {
    #[error("invalid generator spec: {0}")]
    InvalidSpec(String),
    #[error("pool exhausted: {0}")]
    PoolExhausted(String),
    #[error("{path}:{line}: {message}")]
    Validation {
        path: String,
        line: usize,
        message: String,
    },
    #[error("corpus integrity: {0}")]
    Integrity(String),
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// A pool entry with a canonical spelling and a fused alias spelling.
#[derive(Debug, Clone)]
pub struct Surface {
    pub canonical: String,
    pub alias: String,
}

/// Entity/verb/object surface pools for a spec. Exposed so hard-negative
/// augmentation can swap entities for in-pool siblings.
#[derive(Debug, Clone)]
pub struct SurfacePools {
    pub subjects: Vec<Surface>,
    pub verbs: Vec<String>,
    pub objects: Vec<Surface>,
}

const SUBJECT_SYLLABLES: [&str; 25] = [
    "ba", "be", "bi", "bo", "bu", "da", "de", "di", "do", "du", "fa", "fe", "fi", "fo", "fu",
    "ga", "ge", "gi", "go", "gu", "ka", "ke", "ki", "ko", "ku",
];
const OBJECT_SYLLABLES: [&str; 25] = [
    "la", "le", "li", "lo", "lu", "ma", "me", "mi", "mo", "mu", "na", "ne", "ni", "no", "nu",
    "pa", "pe", "pi", "po", "pu", "ra", "re", "ri", "ro", "ru",
];
const VERBS: [&str; 40] = [
    "launches", "unveils", "acquires", "releases", "announces", "debuts", "recalls", "expands",
    "suspends", "confirms", "denies", "ships", "delays", "cancels", "reveals", "tests", "adopts",
    "abandons", "endorses", "rejects", "merges", "splits", "sues", "settles", "patents",
    "licenses", "exports", "imports", "upgrades", "retires", "revives", "spins", "buys", "sells",
    "backs", "drops", "joins", "exits", "wins", "loses",
];
const PREFIXES: [&str; 5] = ["newsdesk:", "wire:", "liveblog:", "bulletin:", "flashbrief:"];
const TRAILERS: [[&str; 2]; 5] = [
    ["details", "inside"],
    ["more", "soon"],
    ["sources", "say"],
    ["report", "claims"],
    ["analysts", "react"],
];
const HASHTAGS: [&str; 6] = ["#breaking", "#trending", "#update", "#tech", "#market", "#viral"];

fn syllable_word(syllables: &[&str; 25], i: usize) -> String {
    if i < 625 {
        format!("{}{}", syllables[i / 25], syllables[i % 25])
    } else {
        let j = i - 625;
        format!(
            "{}{}{}",
            syllables[(j / 625) % 25],
            syllables[(j / 25) % 25],
            syllables[j % 25]
        )
    }
}

impl SurfacePools {
    pub fn build(spec: &GeneratorSpec) -> Self {
        let subjects = (0..spec.entity_pool)
            .map(|i| {
                let c = syllable_word(&SUBJECT_SYLLABLES, i);
                let alias = format!("{c}inc");
                Surface { canonical: c, alias }
            })
            .collect();
        let objects = (0..spec.object_pool)
            .map(|i| {
                let c = syllable_word(&OBJECT_SYLLABLES, i);
                let alias = format!("{c}pro");
                Surface { canonical: c, alias }
            })
            .collect();
        let verbs = (0..spec.verb_pool)
            .map(|i| {
                if i < VERBS.len() {
                    VERBS[i].to_string()
                } else {
                    format!("{}izes", syllable_word(&SUBJECT_SYLLABLES, i - VERBS.len()))
                }
            })
            .collect();
        SurfacePools {
            subjects,
            verbs,
            objects,
        }
    }
}

/// Query shapes; every shape carries at least two event fields, which is what
/// makes relevance unambiguous under the distinct-pair sampling below.
#[derive(Debug, Clone, Copy)]
enum QueryForm {
    SubjObj,
    TrigObj,
    Full,
    SubjTrig,
}

const QUERY_FORMS: [QueryForm; 4] = [
    QueryForm::SubjObj,
    QueryForm::TrigObj,
    QueryForm::Full,
    QueryForm::SubjTrig,
];

/// Sample `n_events` triples whose (subject,verb), (subject,object) and
/// (verb,object) pairs are all distinct across events. Any two event fields
/// then identify the event uniquely, so 2-token queries stay unambiguous.
fn sample_triples(spec: &GeneratorSpec) -> Result<Vec<(usize, usize, usize)>, CorpusError> {
    let (ns, nv, no) = (spec.entity_pool, spec.verb_pool, spec.object_pool);
    let pair_cap = (ns * nv).min(ns * no).min(nv * no);
    if spec.n_events > pair_cap {
        return Err(CorpusError::PoolExhausted(format!(
            "{} distinct events requested but the combinatorial pool supports at most {pair_cap}",
            spec.n_events
        )));
    }
    let mut rng = seeded_rng(spec.seed, "corpus/triples");
    let mut sv = HashSet::new();
    let mut so = HashSet::new();
    let mut vo = HashSet::new();
    let mut triples = Vec::with_capacity(spec.n_events);
    for e in 0..spec.n_events {
        let mut placed = false;
        for _ in 0..100_000 {
            let s = rng.random_range(0..ns);
            let v = rng.random_range(0..nv);
            let o = rng.random_range(0..no);
            if sv.contains(&(s, v)) || so.contains(&(s, o)) || vo.contains(&(v, o)) {
                continue;
            }
            sv.insert((s, v));
            so.insert((s, o));
            vo.insert((v, o));
            triples.push((s, v, o));
            placed = true;
            break;
        }
        if !placed {
            return Err(CorpusError::PoolExhausted(format!(
                "could not place distinct event {e} of {}; enlarge the pools",
                spec.n_events
            )));
        }
    }
    Ok(triples)
}

fn pick_surface(rng: &mut impl Rng, swap_rate: f64, surface: &Surface) -> String {
    if rng.random::<f64>() < swap_rate {
        surface.alias.clone()
    } else {
        surface.canonical.clone()
    }
}

pub fn generate_corpus(spec: &GeneratorSpec) -> Result<Corpus, CorpusError> {
    spec.validate()?;
    let pools = SurfacePools::build(spec);
    let triples = sample_triples(spec)?;

    let mut documents = Vec::new();
    let mut gold_events = BTreeMap::new();
    let mut rng_t = seeded_rng(spec.seed, "corpus/titles");
    for (ei, &(s, v, o)) in triples.iter().enumerate() {
        let event_id = format!("e{ei:04}");
        for _ in 0..spec.titles_per_event {
            let doc_id = format!("d{:05}", documents.len());
            let subj = pick_surface(&mut rng_t, spec.synonym_swap_rate, &pools.subjects[s]);
            let obj = pick_surface(&mut rng_t, spec.synonym_swap_rate, &pools.objects[o]);
            let verb = pools.verbs[v].clone();
            let mut tokens: Vec<String> = Vec::new();
            if rng_t.random::<f64>() < spec.prefix_rate {
                tokens.push(PREFIXES[rng_t.random_range(0..PREFIXES.len())].to_string());
            }
            tokens.push(subj.clone());
            tokens.push(verb.clone());
            tokens.push(obj.clone());
            if rng_t.random::<f64>() < spec.trailing_rate {
                let t = TRAILERS[rng_t.random_range(0..TRAILERS.len())];
                tokens.extend(t.iter().map(|w| w.to_string()));
            }
            if rng_t.random::<f64>() < spec.hashtag_rate {
                let first = rng_t.random_range(0..HASHTAGS.len());
                tokens.push(HASHTAGS[first].to_string());
                if rng_t.random::<f64>() < 0.5 {
                    let mut second = rng_t.random_range(0..HASHTAGS.len() - 1);
                    if second >= first {
                        second += 1;
                    }
                    tokens.push(HASHTAGS[second].to_string());
                }
            }
            gold_events.insert(doc_id.clone(), EventTriple::new(subj, verb, obj));
            documents.push(Document {
                doc_id,
                title: tokens.join(" "),
                event_id: Some(event_id.clone()),
            });
        }
    }

    let mut queries = Vec::new();
    let mut rng_q = seeded_rng(spec.seed, "corpus/queries");
    for (ei, &(s, v, o)) in triples.iter().enumerate() {
        let event_id = format!("e{ei:04}");
        for k in 0..spec.queries_per_event {
            let query_id = format!("q{:05}", queries.len());
            let mut form = QUERY_FORMS[k % QUERY_FORMS.len()];
            let has_subject = matches!(form, QueryForm::SubjObj | QueryForm::Full | QueryForm::SubjTrig);
            if has_subject && rng_q.random::<f64>() < spec.subject_drop_rate {
                form = QueryForm::TrigObj;
            }
            let subj = pick_surface(&mut rng_q, spec.synonym_swap_rate, &pools.subjects[s]);
            let obj = pick_surface(&mut rng_q, spec.synonym_swap_rate, &pools.objects[o]);
            let verb = pools.verbs[v].clone();
            let tokens: Vec<String> = match form {
                QueryForm::SubjObj => vec![subj, obj],
                QueryForm::TrigObj => vec![verb, obj],
                QueryForm::Full => vec![subj, verb, obj],
                QueryForm::SubjTrig => vec![subj, verb],
            };
            queries.push(Query {
                query_id,
                text: tokens.join(" "),
                event_id: Some(event_id.clone()),
            });
        }
    }

    let mut pairs = Vec::new();
    let mut rng_n = seeded_rng(spec.seed, "corpus/negatives");
    for q in &queries {
        let mut used: HashSet<usize> = HashSet::new();
        let positives: Vec<usize> = documents
            .iter()
            .enumerate()
            .filter(|(_, d)| d.event_id == q.event_id)
            .map(|(i, _)| i)
            .collect();
        used.extend(&positives);
        for &p in &positives {
            pairs.push(LabeledPair {
                query_id: q.query_id.clone(),
                doc_id: documents[p].doc_id.clone(),
                label: 1,
            });
            let mut candidates: Vec<usize> = (0..documents.len())
                .filter(|i| documents[*i].event_id != q.event_id && !used.contains(i))
                .collect();
            let take = spec.negatives_per_positive.min(candidates.len());
            for j in 0..take {
                let pick = rng_n.random_range(j..candidates.len());
                candidates.swap(j, pick);
                used.insert(candidates[j]);
                pairs.push(LabeledPair {
                    query_id: q.query_id.clone(),
                    doc_id: documents[candidates[j]].doc_id.clone(),
                    label: 0,
                });
            }
        }
    }

    Ok(Corpus {
        documents,
        queries,
        pairs,
        gold_events,
    })
}

/// Split by event id so no event contributes to both sides. Items without an
/// event id stay in train; pairs that would cross the split are dropped.
pub fn split_by_event(
    corpus: &Corpus,
    test_fraction: f64,
    seed: u64,
) -> Result<(Corpus, Corpus), CorpusError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(CorpusError::InvalidSpec(
            "test_fraction must be in (0,1)".into(),
        ));
    }
    let mut event_ids: Vec<String> = corpus
        .documents
        .iter()
        .filter_map(|d| d.event_id.clone())
        .chain(corpus.queries.iter().filter_map(|q| q.event_id.clone()))
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    if event_ids.len() < 2 {
        return Err(CorpusError::Integrity(format!(
            "need at least 2 events to split, found {}",
            event_ids.len()
        )));
    }
    let n = event_ids.len();
    let n_test = ((n as f64 * test_fraction).round() as usize).clamp(1, n - 1);
    let mut rng = seeded_rng(seed, "corpus/split");
    event_ids.shuffle(&mut rng);
    let test_set: HashSet<&String> = event_ids.iter().take(n_test).collect();

    let in_test = |eid: &Option<String>| eid.as_ref().map(|e| test_set.contains(e)).unwrap_or(false);
    let take_side = |test: bool| -> Corpus {
        let documents: Vec<Document> = corpus
            .documents
            .iter()
            .filter(|d| in_test(&d.event_id) == test)
            .cloned()
            .collect();
        let queries: Vec<Query> = corpus
            .queries
            .iter()
            .filter(|q| in_test(&q.event_id) == test)
            .cloned()
            .collect();
        let doc_ids: HashSet<&String> = documents.iter().map(|d| &d.doc_id).collect();
        let query_ids: HashSet<&String> = queries.iter().map(|q| &q.query_id).collect();
        let pairs = corpus
            .pairs
            .iter()
            .filter(|p| doc_ids.contains(&p.doc_id) && query_ids.contains(&p.query_id))
            .cloned()
            .collect();
        let gold_events = corpus
            .gold_events
            .iter()
            .filter(|(d, _)| doc_ids.contains(d))
            .map(|(d, e)| (d.clone(), e.clone()))
            .collect();
        Corpus {
            documents,
            queries,
            pairs,
            gold_events,
        }
    };
    Ok((take_side(false), take_side(true)))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EventRow {
    doc_id: String,
    subject: String,
    trigger: String,
    object: String,
}

pub fn save_corpus(corpus: &Corpus, dir: &Path) -> Result<(), CorpusError> {
    std::fs::create_dir_all(dir)?;
    write_jsonl(&dir.join("documents.jsonl"), &corpus.documents)?;
    write_jsonl(&dir.join("queries.jsonl"), &corpus.queries)?;
    write_jsonl(&dir.join("pairs.jsonl"), &corpus.pairs)?;
    let events: Vec<EventRow> = corpus
        .gold_events
        .iter()
        .map(|(d, e)| EventRow {
            doc_id: d.clone(),
            subject: e.subject.clone(),
            trigger: e.trigger.clone(),
            object: e.object.clone(),
        })
        .collect();
    write_jsonl(&dir.join("events.jsonl"), &events)?;
    Ok(())
}

/// Load labeled pairs alone; labels are validated, referential checks happen
/// in [`load_corpus`] where both id universes are known.
pub fn load_pairs(path: &Path) -> Result<Vec<LabeledPair>, CorpusError> {
    let rows: Vec<(usize, LabeledPair)> = read_jsonl_numbered(path)?;
    for (line, p) in &rows {
        if p.label > 1 {
            return Err(CorpusError::Validation {
                path: path.display().to_string(),
                line: *line,
                message: format!("label must be 0 or 1, got {}", p.label),
            });
        }
    }
    Ok(rows.into_iter().map(|(_, p)| p).collect())
}

pub fn load_corpus(dir: &Path) -> Result<Corpus, CorpusError> {
    let doc_path = dir.join("documents.jsonl");
    let docs: Vec<(usize, Document)> = read_jsonl_numbered(&doc_path)?;
    let mut seen = HashSet::new();
    for (line, d) in &docs {
        if !seen.insert(&d.doc_id) {
            return Err(CorpusError::Validation {
                path: doc_path.display().to_string(),
                line: *line,
                message: format!("duplicate doc_id {}", d.doc_id),
            });
        }
        if d.title.split_whitespace().next().is_none() {
            return Err(CorpusError::Validation {
                path: doc_path.display().to_string(),
                line: *line,
                message: format!("empty title for {}", d.doc_id),
            });
        }
    }
    let query_path = dir.join("queries.jsonl");
    let queries: Vec<(usize, Query)> = read_jsonl_numbered(&query_path)?;
    let mut seen_q = HashSet::new();
    for (line, q) in &queries {
        if !seen_q.insert(&q.query_id) {
            return Err(CorpusError::Validation {
                path: query_path.display().to_string(),
                line: *line,
                message: format!("duplicate query_id {}", q.query_id),
            });
        }
    }

    let pairs_path = dir.join("pairs.jsonl");
    let pairs = load_pairs(&pairs_path)?;
    let doc_ids: HashSet<&String> = docs.iter().map(|(_, d)| &d.doc_id).collect();
    let query_ids: HashSet<&String> = queries.iter().map(|(_, q)| &q.query_id).collect();
    for p in &pairs {
        if !query_ids.contains(&p.query_id) {
            return Err(CorpusError::Integrity(format!(
                "pair references unknown query_id {}",
                p.query_id
            )));
        }
        if !doc_ids.contains(&p.doc_id) {
            return Err(CorpusError::Integrity(format!(
                "pair references unknown doc_id {}",
                p.doc_id
            )));
        }
    }

    let events_path = dir.join("events.jsonl");
    let mut gold_events = BTreeMap::new();
    if events_path.exists() {
        let rows: Vec<(usize, EventRow)> = read_jsonl_numbered(&events_path)?;
        for (line, r) in rows {
            if !doc_ids.contains(&r.doc_id) {
                return Err(CorpusError::Integrity(format!(
                    "event row references unknown doc_id {}",
                    r.doc_id
                )));
            }
            let triple = EventTriple::new(r.subject, r.trigger, r.object);
            if !triple.is_complete() {
                return Err(CorpusError::Validation {
                    path: events_path.display().to_string(),
                    line,
                    message: format!("incomplete event triple for {}", r.doc_id),
                });
            }
            gold_events.insert(r.doc_id, triple);
        }
    }

    Ok(Corpus {
        documents: docs.into_iter().map(|(_, d)| d).collect(),
        queries: queries.into_iter().map(|(_, q)| q).collect(),
        pairs,
        gold_events,
    })
}
