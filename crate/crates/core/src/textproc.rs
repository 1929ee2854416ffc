//! Tokenization, vocabulary, prompt templates, event serialization, and a
//! rule-based event-triple extractor.
//!
//! Token rule: whitespace-separated runs for Latin-script text, one token per
//! character for CJK. The vocabulary reserves [PAD]=0 [CLS]=1 [SEP]=2
//! [MASK]=3 [UNK]=4 followed by the continuous-prompt slots [P1..Pn]; content
//! ids are assigned by descending frequency, ties broken by token text.

use crate::corpus::{Corpus, EventTriple};
use serde::{Deserialize, Serialize};
use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::path::Path;

pub const PAD: usize = 0;
pub const CLS: usize = 1;
pub const SEP: usize = 2;
pub const MASK: usize = 3;
pub const UNK: usize = 4;
const RESERVED_NAMES: [&str; 5] = ["[PAD]", "[CLS]", "[SEP]", "[MASK]", "[UNK]"];

#[derive(Debug, thiserror::Error)]
pub enum TextError {
    #[error("empty text")]
    EmptyText,
    #[error("no corpus text to build a vocabulary from")]
    EmptyCorpus,
    #[error("invalid template {id}: {message}")]
    BadTemplate { id: String, message: String },
    #[error("prompt render overflows max_len {max_len}: {segment} needs {needed}")]
    PromptOverflow {
        segment: &'static str,
        needed: usize,
        max_len: usize,
    },
    #[error("template needs {needed} prompt slots, vocab has {available}")]
    MissingPromptSlots { needed: usize, available: usize },
    #[error("event field {0} is empty")]
    EmptyEventField(&'static str),
    #[error("cannot parse event tokens: {0}")]
    BadEventEncoding(String),
    #[error("vocab file invalid: {0}")]
    BadVocabFile(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

fn is_cjk(c: char) -> bool {
    matches!(u32::from(c),
        0x4E00..=0x9FFF | 0x3400..=0x4DBF | 0xF900..=0xFAFF)
}

/// Raw text to surface tokens: whitespace-split Latin runs, per-char CJK.
pub fn split_tokens(text: &str) -> Vec<String> {
    let mut out = Vec::new();
    let mut run = String::new();
    for c in text.chars() {
        if c.is_whitespace() {
            if !run.is_empty() {
                out.push(std::mem::take(&mut run));
            }
        } else if is_cjk(c) {
            if !run.is_empty() {
                out.push(std::mem::take(&mut run));
            }
            out.push(c.to_string());
        } else {
            run.push(c);
        }
    }
    if !run.is_empty() {
        out.push(run);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSeq {
    pub ids: Vec<usize>,
    pub truncated: bool,
}

impl TokenSeq {
    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    /// All tokens, index = id; reserved names first, then content.
    tokens: Vec<String>,
    map: HashMap<String, usize>,
    n_prompt_slots: usize,
}

impl Vocab {
    fn from_content(content: Vec<String>, n_prompt_slots: usize) -> Self {
        let mut tokens: Vec<String> = RESERVED_NAMES.iter().map(|s| s.to_string()).collect();
        for k in 1..=n_prompt_slots {
            tokens.push(format!("[P{k}]"));
        }
        tokens.extend(content);
        let map = tokens
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        Vocab {
            tokens,
            map,
            n_prompt_slots,
        }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn n_reserved(&self) -> usize {
        RESERVED_NAMES.len() + self.n_prompt_slots
    }

    pub fn n_prompt_slots(&self) -> usize {
        self.n_prompt_slots
    }

    pub fn is_reserved(&self, id: usize) -> bool {
        id < self.n_reserved()
    }

    pub fn id(&self, token: &str) -> Option<usize> {
        self.map.get(token).copied()
    }

    pub fn id_or_unk(&self, token: &str) -> usize {
        self.id(token).unwrap_or(UNK)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    /// Id of the k-th continuous-prompt slot, 0-based.
    pub fn prompt_slot_id(&self, k: usize) -> usize {
        assert!(k < self.n_prompt_slots, "prompt slot {k} out of range");
        RESERVED_NAMES.len() + k
    }

    pub fn content_tokens(&self) -> impl Iterator<Item = &str> {
        self.tokens[self.n_reserved()..].iter().map(|s| s.as_str())
    }

    /// Stable digest of the full id-ordered token list. Models and indexes
    /// record it to refuse inputs tokenized under a different vocabulary.
    pub fn fingerprint(&self) -> String {
        crate::util::sha256_hex(self.tokens.join("\n").as_bytes())
    }

    pub fn save(&self, path: &Path) -> Result<(), TextError> {
        let reserved: BTreeMap<String, usize> = self.tokens[..self.n_reserved()]
            .iter()
            .enumerate()
            .map(|(i, t)| (t.clone(), i))
            .collect();
        let file = VocabFile {
            tokens: self.tokens[self.n_reserved()..].to_vec(),
            reserved,
        };
        let body = serde_json::to_vec_pretty(&file)?;
        crate::util::atomic_write(path, &body)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, TextError> {
        let body = std::fs::read(path)?;
        let file: VocabFile = serde_json::from_slice(&body)?;
        let n_prompt_slots = file.reserved.len().saturating_sub(RESERVED_NAMES.len());
        for (i, name) in RESERVED_NAMES.iter().enumerate() {
            if file.reserved.get(*name) != Some(&i) {
                return Err(TextError::BadVocabFile(format!(
                    "reserved token {name} missing or at wrong id"
                )));
            }
        }
        for k in 1..=n_prompt_slots {
            let name = format!("[P{k}]");
            let want = RESERVED_NAMES.len() + k - 1;
            if file.reserved.get(&name) != Some(&want) {
                return Err(TextError::BadVocabFile(format!(
                    "prompt slot {name} missing or at wrong id"
                )));
            }
        }
        let mut seen = BTreeSet::new();
        for t in &file.tokens {
            if !seen.insert(t) {
                return Err(TextError::BadVocabFile(format!("duplicate token {t}")));
            }
        }
        Ok(Vocab::from_content(file.tokens, n_prompt_slots))
    }
}

#[derive(Serialize, Deserialize)]
struct VocabFile {
    tokens: Vec<String>,
    reserved: BTreeMap<String, usize>,
}

#[derive(Debug)]
pub struct VocabBuild {
    pub vocab: Vocab,
    /// True when no corpus token met min_freq (reserved/extras-only vocab).
    pub content_empty: bool,
}

/// Count tokens over texts, keep those with freq >= min_freq plus `extras`
/// (template literals and event separators must exist regardless of corpus
/// frequency), order by (-freq, token).
pub fn build_vocab<'a>(
    texts: impl IntoIterator<Item = &'a str>,
    min_freq: usize,
    n_prompt_slots: usize,
    extras: &[String],
) -> Result<VocabBuild, TextError> {
    let mut freq: BTreeMap<String, usize> = BTreeMap::new();
    let mut any_text = false;
    for t in texts {
        any_text = true;
        for tok in split_tokens(t) {
            *freq.entry(tok).or_insert(0) += 1;
        }
    }
    if !any_text {
        return Err(TextError::EmptyCorpus);
    }
    let content_empty = !freq.values().any(|&c| c >= min_freq.max(1));
    let mut kept: Vec<(String, usize)> = Vec::new();
    let extra_set: BTreeSet<&String> = extras.iter().collect();
    for (tok, c) in &freq {
        if *c >= min_freq.max(1) || extra_set.contains(tok) {
            kept.push((tok.clone(), *c));
        }
    }
    for e in extras {
        if !freq.contains_key(e) {
            kept.push((e.clone(), 0));
        }
    }
    kept.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    kept.dedup_by(|a, b| a.0 == b.0);
    let content: Vec<String> = kept.into_iter().map(|(t, _)| t).collect();
    Ok(VocabBuild {
        vocab: Vocab::from_content(content, n_prompt_slots),
        content_empty,
    })
}

/// Tokens every vocabulary needs for decoder targets: the registry templates'
/// literals plus the event separator and escape tokens.
pub fn default_extra_tokens() -> Vec<String> {
    let mut set: BTreeSet<String> = BTreeSet::new();
    set.insert(";".to_string());
    set.insert("\\".to_string());
    for t in default_registry() {
        for elem in &t.pattern {
            if let TemplateElem::Lit(w) = elem {
                set.insert(w.clone());
            }
        }
    }
    set.into_iter().collect()
}

/// Vocabulary over a corpus' titles, queries, and gold event fields.
pub fn corpus_vocab(
    corpus: &Corpus,
    min_freq: usize,
    n_prompt_slots: usize,
) -> Result<VocabBuild, TextError> {
    let mut texts: Vec<&str> = Vec::new();
    texts.extend(corpus.documents.iter().map(|d| d.title.as_str()));
    texts.extend(corpus.queries.iter().map(|q| q.text.as_str()));
    for e in corpus.gold_events.values() {
        texts.push(&e.subject);
        texts.push(&e.trigger);
        texts.push(&e.object);
    }
    build_vocab(texts, min_freq, n_prompt_slots, &default_extra_tokens())
}

/// Content-token encoding (no [CLS]/[SEP]); truncates to max_len.
pub fn tokenize(text: &str, vocab: &Vocab, max_len: usize) -> Result<TokenSeq, TextError> {
    let toks = split_tokens(text);
    if toks.is_empty() {
        return Err(TextError::EmptyText);
    }
    let truncated = toks.len() > max_len;
    let ids = toks
        .iter()
        .take(max_len)
        .map(|t| vocab.id_or_unk(t))
        .collect();
    Ok(TokenSeq { ids, truncated })
}

/// Encoder input: [CLS] content [SEP], total length <= max_len.
pub fn sequence_for_encoder(
    text: &str,
    vocab: &Vocab,
    max_len: usize,
) -> Result<TokenSeq, TextError> {
    assert!(max_len >= 3, "max_len must fit [CLS] x [SEP]");
    let inner = tokenize(text, vocab, max_len - 2)?;
    let mut ids = Vec::with_capacity(inner.ids.len() + 2);
    ids.push(CLS);
    ids.extend(inner.ids);
    ids.push(SEP);
    Ok(TokenSeq {
        ids,
        truncated: inner.truncated,
    })
}

pub fn detokenize(ids: &[usize], vocab: &Vocab) -> String {
    ids.iter()
        .map(|&i| vocab.token(i))
        .collect::<Vec<_>>()
        .join(" ")
}

// ---------------------------------------------------------------------------
// Event serialization: word-level "subject ; trigger ; object" with a literal
// "\\" escape token before any field word that collides with ";" or "\\".

pub fn serialize_event(e: &EventTriple) -> Result<Vec<String>, TextError> {
    let fields = [
        ("subject", &e.subject),
        ("trigger", &e.trigger),
        ("object", &e.object),
    ];
    let mut out = Vec::new();
    for (i, (name, field)) in fields.iter().enumerate() {
        let words: Vec<&str> = field.split_whitespace().collect();
        if words.is_empty() {
            return Err(TextError::EmptyEventField(name));
        }
        if i > 0 {
            out.push(";".to_string());
        }
        for w in words {
            if w == ";" || w == "\\" {
                out.push("\\".to_string());
            }
            out.push(w.to_string());
        }
    }
    Ok(out)
}

pub fn parse_event(tokens: &[String]) -> Result<EventTriple, TextError> {
    let mut fields: Vec<Vec<String>> = vec![Vec::new()];
    let mut escaped = false;
    for t in tokens {
        if escaped {
            fields.last_mut().unwrap().push(t.clone());
            escaped = false;
        } else if t == "\\" {
            escaped = true;
        } else if t == ";" {
            fields.push(Vec::new());
        } else {
            fields.last_mut().unwrap().push(t.clone());
        }
    }
    if escaped {
        return Err(TextError::BadEventEncoding("dangling escape".into()));
    }
    if fields.len() != 3 {
        return Err(TextError::BadEventEncoding(format!(
            "expected 3 fields, found {}",
            fields.len()
        )));
    }
    if fields.iter().any(|f| f.is_empty()) {
        return Err(TextError::BadEventEncoding("empty field".into()));
    }
    Ok(EventTriple::new(
        fields[0].join(" "),
        fields[1].join(" "),
        fields[2].join(" "),
    ))
}

// ---------------------------------------------------------------------------
// Rule-based extractor.

#[derive(Debug, Clone, Default)]
pub struct VerbLexicon(BTreeSet<String>);

impl VerbLexicon {
    pub fn new(verbs: impl IntoIterator<Item = String>) -> Self {
        VerbLexicon(verbs.into_iter().collect())
    }

    /// One verb per line, UTF-8; blank lines ignored.
    pub fn load(path: &Path) -> Result<Self, TextError> {
        let body = std::fs::read_to_string(path)?;
        Ok(Self::new(
            body.lines()
                .map(str::trim)
                .filter(|l| !l.is_empty())
                .map(String::from),
        ))
    }

    pub fn save(&self, path: &Path) -> Result<(), TextError> {
        let mut body = String::new();
        for v in &self.0 {
            body.push_str(v);
            body.push('\n');
        }
        crate::util::atomic_write(path, body.as_bytes())?;
        Ok(())
    }

    pub fn contains(&self, word: &str) -> bool {
        self.0.contains(word)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Media-noise words the extractor skips: hashtags, source prefixes
/// (trailing colon), bare punctuation.
pub fn is_noise_word(w: &str) -> bool {
    w.starts_with('#') || w.ends_with(':') || w.chars().all(|c| !c.is_alphanumeric() && !is_cjk(c))
}

/// First lexicon verb becomes the trigger; the contiguous non-noise word runs
/// immediately before/after it become subject/object. Missing runs leave the
/// corresponding field empty (subject-predicate or predicate-object shapes);
/// use `EventTriple::is_complete` to require the full shape.
pub fn extract_event_rule(title: &str, lexicon: &VerbLexicon) -> Option<EventTriple> {
    let words: Vec<&str> = title.split_whitespace().collect();
    let vi = words.iter().position(|w| lexicon.contains(w))?;
    let mut subject: Vec<&str> = Vec::new();
    for &w in words[..vi].iter().rev() {
        if is_noise_word(w) || lexicon.contains(w) {
            break;
        }
        subject.push(w);
    }
    subject.reverse();
    let mut object: Vec<&str> = Vec::new();
    for &w in &words[vi + 1..] {
        if is_noise_word(w) || lexicon.contains(w) {
            break;
        }
        object.push(w);
    }
    Some(EventTriple::new(
        subject.join(" "),
        words[vi],
        object.join(" "),
    ))
}

// ---------------------------------------------------------------------------
// Prompt templates.

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TemplateKind {
    Handcrafted,
    Continuous,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum TemplateElem {
    Lit(String),
    /// The [X] slot filled by the title tokens.
    SlotX,
    Mask,
    /// 0-based continuous prompt slot v_{i+1}.
    PromptVar(usize),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PromptTemplate {
    pub id: String,
    pub kind: TemplateKind,
    pub pattern: Vec<TemplateElem>,
    pub n_prompt_slots: usize,
}

impl PromptTemplate {
    pub fn validate(&self) -> Result<(), TextError> {
        let bad = |message: String| TextError::BadTemplate {
            id: self.id.clone(),
            message,
        };
        let n_x = self
            .pattern
            .iter()
            .filter(|e| matches!(e, TemplateElem::SlotX))
            .count();
        if n_x != 1 {
            return Err(bad(format!("expected exactly one [X], found {n_x}")));
        }
        let n_mask = self
            .pattern
            .iter()
            .filter(|e| matches!(e, TemplateElem::Mask))
            .count();
        if n_mask == 0 {
            return Err(bad("template needs at least one [MASK]".into()));
        }
        let max_var = self
            .pattern
            .iter()
            .filter_map(|e| match e {
                TemplateElem::PromptVar(i) => Some(*i),
                _ => None,
            })
            .max();
        match self.kind {
            TemplateKind::Handcrafted => {
                if max_var.is_some() || self.n_prompt_slots != 0 {
                    return Err(bad("handcrafted templates cannot use prompt slots".into()));
                }
            }
            TemplateKind::Continuous => {
                if self.n_prompt_slots == 0 {
                    return Err(bad("continuous template needs n_prompt_slots >= 1".into()));
                }
                if let Some(mv) = max_var {
                    if mv >= self.n_prompt_slots {
                        return Err(bad(format!(
                            "prompt var v{} exceeds n_prompt_slots {}",
                            mv + 1,
                            self.n_prompt_slots
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// Tokens other than the title: template overhead in the decoder input
    /// (excludes [CLS]/E/[SEP]).
    pub fn overhead(&self) -> usize {
        self.pattern
            .iter()
            .filter(|e| !matches!(e, TemplateElem::SlotX))
            .count()
    }
}

fn elem_from_str(s: &str) -> Result<TemplateElem, String> {
    if s == "[X]" {
        return Ok(TemplateElem::SlotX);
    }
    if s == "[MASK]" {
        return Ok(TemplateElem::Mask);
    }
    if let Some(body) = s.strip_prefix("[P").and_then(|r| r.strip_suffix(']')) {
        let k: usize = body
            .parse()
            .map_err(|_| format!("bad prompt slot marker {s}"))?;
        if k == 0 {
            return Err(format!("prompt slots are 1-based, got {s}"));
        }
        return Ok(TemplateElem::PromptVar(k - 1));
    }
    Ok(TemplateElem::Lit(s.to_string()))
}

fn elem_to_string(e: &TemplateElem) -> String {
    match e {
        TemplateElem::Lit(w) => w.clone(),
        TemplateElem::SlotX => "[X]".to_string(),
        TemplateElem::Mask => "[MASK]".to_string(),
        TemplateElem::PromptVar(i) => format!("[P{}]", i + 1),
    }
}

fn template(id: &str, kind: TemplateKind, words: &[&str], n_prompt_slots: usize) -> PromptTemplate {
    let pattern = words
        .iter()
        .map(|w| elem_from_str(w).expect("static template pattern"))
        .collect();
    let t = PromptTemplate {
        id: id.to_string(),
        kind,
        pattern,
        n_prompt_slots,
    };
    t.validate().expect("static template valid");
    t
}

/// Best-performing handcrafted template; the registry default.
pub const DEFAULT_TEMPLATE: &str = "subject-object-action";

/// Registry: four reported prompt variants plus the object/trigger/topic
/// phrasing, as token patterns.
pub fn default_registry() -> Vec<PromptTemplate> {
    vec![
        template(
            "subject-short",
            TemplateKind::Handcrafted,
            &["in", "[X]", "the", "subject", "is", "[MASK]"],
            0,
        ),
        template(
            DEFAULT_TEMPLATE,
            TemplateKind::Handcrafted,
            &[
                "in", "[X]", "the", "subject", "is", "[MASK]", "the", "object", "is", "[MASK]",
                "the", "action", "is", "[MASK]",
            ],
            0,
        ),
        template(
            "object-trigger-topic",
            TemplateKind::Handcrafted,
            &[
                "in", "[X]", "the", "object", "is", "[MASK]", "the", "trigger", "is", "[MASK]",
                "and", "the", "topic", "is", "[MASK]",
            ],
            0,
        ),
        template(
            "continuous-single-mask",
            TemplateKind::Continuous,
            &["[X]", "[P1]", "[P2]", "[MASK]", "[P3]", "[P4]"],
            4,
        ),
        template(
            "continuous-triple-mask",
            TemplateKind::Continuous,
            &["[X]", "[P1]", "[P2]", "[MASK]", "[MASK]", "[MASK]", "[P3]", "[P4]"],
            4,
        ),
    ]
}

pub fn registry_template(id: &str) -> Option<PromptTemplate> {
    default_registry().into_iter().find(|t| t.id == id)
}

#[derive(Serialize, Deserialize)]
struct TemplateFileEntry {
    kind: TemplateKind,
    pattern: Vec<String>,
    #[serde(default)]
    n_prompt_slots: usize,
}

pub fn save_registry(templates: &[PromptTemplate], path: &Path) -> Result<(), TextError> {
    let map: BTreeMap<String, TemplateFileEntry> = templates
        .iter()
        .map(|t| {
            (
                t.id.clone(),
                TemplateFileEntry {
                    kind: t.kind,
                    pattern: t.pattern.iter().map(elem_to_string).collect(),
                    n_prompt_slots: t.n_prompt_slots,
                },
            )
        })
        .collect();
    let body = serde_json::to_vec_pretty(&map)?;
    crate::util::atomic_write(path, &body)?;
    Ok(())
}

pub fn load_registry(path: &Path) -> Result<Vec<PromptTemplate>, TextError> {
    let body = std::fs::read(path)?;
    let map: BTreeMap<String, TemplateFileEntry> = serde_json::from_slice(&body)?;
    let mut out = Vec::new();
    for (id, entry) in map {
        let pattern: Result<Vec<TemplateElem>, String> =
            entry.pattern.iter().map(|s| elem_from_str(s)).collect();
        let t = PromptTemplate {
            id: id.clone(),
            kind: entry.kind,
            pattern: pattern.map_err(|message| TextError::BadTemplate {
                id: id.clone(),
                message,
            })?,
            n_prompt_slots: entry.n_prompt_slots,
        };
        t.validate()?;
        out.push(t);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Decoder target rendering.

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DecoderTarget {
    pub input_ids: TokenSeq,
    /// 1 exactly on the E tokens and the closing [SEP]; all-zero when there
    /// is no event to predict.
    pub loss_mask: Vec<u8>,
}

impl DecoderTarget {
    pub fn masked_positions(&self) -> impl Iterator<Item = usize> + '_ {
        self.loss_mask
            .iter()
            .enumerate()
            .filter(|(_, &m)| m == 1)
            .map(|(i, _)| i)
    }
}

/// Build `[CLS] filled-template E [SEP]` with the generation loss mask.
pub fn render_prompt(
    tpl: &PromptTemplate,
    title_tokens: &[usize],
    event: Option<&EventTriple>,
    vocab: &Vocab,
    max_len: usize,
) -> Result<DecoderTarget, TextError> {
    tpl.validate()?;
    if tpl.n_prompt_slots > vocab.n_prompt_slots() {
        return Err(TextError::MissingPromptSlots {
            needed: tpl.n_prompt_slots,
            available: vocab.n_prompt_slots(),
        });
    }
    let mut ids = vec![CLS];
    for elem in &tpl.pattern {
        match elem {
            TemplateElem::Lit(w) => {
                for t in split_tokens(w) {
                    ids.push(vocab.id_or_unk(&t));
                }
            }
            TemplateElem::SlotX => ids.extend_from_slice(title_tokens),
            TemplateElem::Mask => ids.push(MASK),
            TemplateElem::PromptVar(i) => ids.push(vocab.prompt_slot_id(*i)),
        }
    }
    if ids.len() + 1 > max_len {
        return Err(TextError::PromptOverflow {
            segment: "template+title",
            needed: ids.len() + 1,
            max_len,
        });
    }
    let mut mask = vec![0u8; ids.len()];
    if let Some(e) = event {
        let words = serialize_event(e)?;
        for w in &words {
            for t in split_tokens(w) {
                ids.push(vocab.id_or_unk(&t));
                mask.push(1);
            }
        }
        ids.push(SEP);
        mask.push(1);
    } else {
        ids.push(SEP);
        mask.push(0);
    }
    if ids.len() > max_len {
        return Err(TextError::PromptOverflow {
            segment: "event",
            needed: ids.len(),
            max_len,
        });
    }
    Ok(DecoderTarget {
        input_ids: TokenSeq {
            ids,
            truncated: false,
        },
        loss_mask: mask,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_corpus, GeneratorSpec, SurfacePools};
    use proptest::prelude::*;

    fn tiny_vocab(extra: &[&str]) -> Vocab {
        let text = extra.join(" ");
        let mut extras = default_extra_tokens();
        extras.extend(extra.iter().map(|s| s.to_string()));
        build_vocab([text.as_str()], 1, 4, &extras).unwrap().vocab
    }

    #[test]
    fn splitting_follows_script_rules() {
        assert_eq!(split_tokens("mate60pro"), vec!["mate60pro"]);
        assert_eq!(split_tokens("华为 发布"), vec!["华", "为", "发", "布"]);
        assert_eq!(split_tokens("华为发布 mate60"), vec!["华", "为", "发", "布", "mate60"]);
        assert!(split_tokens("   ").is_empty());
    }

    #[test]
    fn reserved_ids_are_pinned() {
        let v = tiny_vocab(&["alpha", "beta"]);
        assert_eq!(v.id("[PAD]"), Some(PAD));
        assert_eq!(v.id("[CLS]"), Some(CLS));
        assert_eq!(v.id("[SEP]"), Some(SEP));
        assert_eq!(v.id("[MASK]"), Some(MASK));
        assert_eq!(v.id("[UNK]"), Some(UNK));
        assert_eq!(v.prompt_slot_id(0), 5);
        assert_eq!(v.prompt_slot_id(3), 8);
        assert_eq!(v.n_reserved(), 9);
    }

    #[test]
    fn vocab_orders_by_freq_then_token() {
        let b = build_vocab(["b b b a a c"], 1, 0, &[]).unwrap();
        let content: Vec<&str> = b.vocab.content_tokens().collect();
        assert_eq!(content, vec!["b", "a", "c"]);
        assert!(!b.content_empty);
        let b2 = build_vocab(["x y"], 5, 0, &[]).unwrap();
        assert!(b2.content_empty);
        assert_eq!(b2.vocab.len(), b2.vocab.n_reserved());
        assert!(build_vocab(std::iter::empty::<&str>(), 1, 0, &[]).is_err());
    }

    #[test]
    fn vocab_roundtrips_through_file() {
        let c = generate_corpus(&GeneratorSpec {
            n_events: 6,
            entity_pool: 6,
            verb_pool: 6,
            object_pool: 6,
            seed: 2,
            ..GeneratorSpec::default()
        })
        .unwrap();
        let v = corpus_vocab(&c, 1, 4).unwrap().vocab;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("vocab.json");
        v.save(&path).unwrap();
        let loaded = Vocab::load(&path).unwrap();
        assert_eq!(v, loaded);
    }

    #[test]
    fn tokenize_truncates_and_rejects_empty() {
        let v = tiny_vocab(&["a", "b", "c", "d"]);
        assert!(matches!(tokenize("", &v, 8), Err(TextError::EmptyText)));
        let t = tokenize("a b c d", &v, 2).unwrap();
        assert!(t.truncated);
        assert_eq!(t.len(), 2);
        let seq = sequence_for_encoder("a b", &v, 16).unwrap();
        assert_eq!(seq.ids[0], CLS);
        assert_eq!(*seq.ids.last().unwrap(), SEP);
        assert_eq!(seq.len(), 4);
    }

    #[test]
    fn detokenize_round_trip_preserves_token_multiset() {
        let c = generate_corpus(&GeneratorSpec { seed: 7, ..GeneratorSpec::default() }).unwrap();
        let v = corpus_vocab(&c, 1, 0).unwrap().vocab;
        for d in c.documents.iter().take(50) {
            let once = tokenize(&d.title, &v, 64).unwrap();
            let again = tokenize(&detokenize(&once.ids, &v), &v, 64).unwrap();
            let mut a = once.ids.clone();
            let mut b = again.ids.clone();
            a.sort_unstable();
            b.sort_unstable();
            assert_eq!(a, b);
        }
    }

    #[test]
    fn extractor_handles_cjk_example() {
        let lex = VerbLexicon::new(["发布".to_string()]);
        let e = extract_event_rule("华为 发布 Mate60", &lex).unwrap();
        assert_eq!(e, EventTriple::new("华为", "发布", "Mate60"));
        assert!(extract_event_rule("华为 推出 Mate60", &lex).is_none());
    }

    #[test]
    fn extractor_skips_noise_and_recovers_gold_on_noise_free_titles() {
        let spec = GeneratorSpec {
            n_events: 40,
            hashtag_rate: 0.0,
            prefix_rate: 0.0,
            trailing_rate: 0.0,
            seed: 13,
            ..GeneratorSpec::default()
        };
        let c = generate_corpus(&spec).unwrap();
        let lex = VerbLexicon::new(SurfacePools::build(&spec).verbs);
        let mut hits = 0;
        for d in &c.documents {
            let got = extract_event_rule(&d.title, &lex).expect("trigger present");
            if got == c.gold_events[&d.doc_id] {
                hits += 1;
            }
        }
        assert_eq!(hits, c.documents.len());

        let noisy = extract_event_rule("newsdesk: baku launches mira #tech", &lex);
        let noisy = noisy.unwrap();
        assert_eq!(noisy.subject, "baku");
        assert_eq!(noisy.trigger, "launches");
        assert_eq!(noisy.object, "mira");
    }

    #[test]
    fn extractor_spans_are_ordered_title_subsequences() {
        let lex = VerbLexicon::new(["hits".to_string()]);
        let e = extract_event_rule("alpha beta hits gamma delta", &lex).unwrap();
        assert_eq!(e.subject, "alpha beta");
        assert_eq!(e.object, "gamma delta");
        let partial = extract_event_rule("#tag hits gamma", &lex).unwrap();
        assert_eq!(partial.subject, "");
        assert!(!partial.is_complete());
        assert_eq!(partial.object, "gamma");
    }

    #[test]
    fn event_serialization_round_trips() {
        let e = EventTriple::new("baku corp", "launches", "mira pro");
        let toks = serialize_event(&e).unwrap();
        assert_eq!(parse_event(&toks).unwrap(), e);
        assert_eq!(toks.iter().filter(|t| *t == ";").count(), 2);
        let empty = EventTriple::new("", "x", "y");
        assert!(serialize_event(&empty).is_err());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn event_serialization_survives_separator_collisions(
            words in proptest::collection::vec("[a-z;\\\\]{1,3}", 1..4),
            trigger in "[a-z;\\\\]{1,4}",
            obj in proptest::collection::vec("[a-z;\\\\]{1,3}", 1..4),
        ) {
            let e = EventTriple::new(words.join(" "), trigger, obj.join(" "));
            let toks = serialize_event(&e).unwrap();
            prop_assert_eq!(parse_event(&toks).unwrap(), e);
        }
    }

    #[test]
    fn registry_templates_validate_and_roundtrip() {
        let reg = default_registry();
        assert_eq!(reg.len(), 5);
        for t in &reg {
            t.validate().unwrap();
        }
        assert!(registry_template(DEFAULT_TEMPLATE).is_some());
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("templates.json");
        save_registry(&reg, &path).unwrap();
        let mut loaded = load_registry(&path).unwrap();
        loaded.sort_by(|a, b| a.id.cmp(&b.id));
        let mut orig = reg.clone();
        orig.sort_by(|a, b| a.id.cmp(&b.id));
        assert_eq!(loaded, orig);
    }

    #[test]
    fn render_prompt_marks_exactly_event_and_sep() {
        let v = tiny_vocab(&["baku", "launches", "mira"]);
        let tpl = registry_template(DEFAULT_TEMPLATE).unwrap();
        let title = tokenize("baku launches mira", &v, 32).unwrap();
        let event = EventTriple::new("baku", "launches", "mira");
        let out = render_prompt(&tpl, &title.ids, Some(&event), &v, 64).unwrap();

        let e_words = serialize_event(&event).unwrap();
        let masked: usize = out.loss_mask.iter().map(|&m| m as usize).sum();
        assert_eq!(masked, e_words.len() + 1);
        assert_eq!(*out.input_ids.ids.last().unwrap(), SEP);
        assert_eq!(*out.loss_mask.last().unwrap(), 1);
        assert_eq!(out.input_ids.ids[0], CLS);
        let mask_count = out.input_ids.ids.iter().filter(|&&i| i == MASK).count();
        assert_eq!(mask_count, 3);
        // E occupies the contiguous run just before [SEP].
        let n = out.input_ids.len();
        let e_ids: Vec<usize> = e_words.iter().map(|w| v.id_or_unk(w)).collect();
        assert_eq!(&out.input_ids.ids[n - 1 - e_ids.len()..n - 1], &e_ids[..]);
        for (i, &m) in out.loss_mask.iter().enumerate() {
            let in_e = i >= n - 1 - e_ids.len();
            assert_eq!(m == 1, in_e, "mask wrong at {i}");
        }
    }

    #[test]
    fn render_prompt_degenerate_and_overflow_cases() {
        let v = tiny_vocab(&["baku", "launches", "mira"]);
        let tpl = registry_template(DEFAULT_TEMPLATE).unwrap();
        let title = tokenize("baku launches mira", &v, 32).unwrap();
        let none = render_prompt(&tpl, &title.ids, None, &v, 64).unwrap();
        assert_eq!(none.loss_mask.iter().map(|&m| m as usize).sum::<usize>(), 0);
        assert_eq!(*none.input_ids.ids.last().unwrap(), SEP);

        let err = render_prompt(&tpl, &title.ids, None, &v, 10).unwrap_err();
        assert!(matches!(
            err,
            TextError::PromptOverflow { segment: "template+title", .. }
        ));
        let event = EventTriple::new("baku", "launches", "mira");
        let tight = 1 + tpl.overhead() + title.ids.len() + 1;
        let err = render_prompt(&tpl, &title.ids, Some(&event), &v, tight).unwrap_err();
        assert!(matches!(err, TextError::PromptOverflow { segment: "event", .. }));
    }

    #[test]
    fn continuous_template_places_slot_markers() {
        let v = tiny_vocab(&["baku"]);
        let tpl = registry_template("continuous-single-mask").unwrap();
        let title = tokenize("baku", &v, 8).unwrap();
        let out = render_prompt(&tpl, &title.ids, None, &v, 32).unwrap();
        let slots: Vec<usize> = (0..4).map(|k| v.prompt_slot_id(k)).collect();
        let found = out
            .input_ids
            .ids
            .iter()
            .filter(|i| slots.contains(i))
            .count();
        assert_eq!(found, 4);

        let no_slots = tiny_vocab(&["baku"]);
        let v0 = build_vocab(["baku"], 1, 0, &[]).unwrap().vocab;
        let _ = no_slots;
        assert!(matches!(
            render_prompt(&tpl, &title.ids, None, &v0, 32),
            Err(TextError::MissingPromptSlots { .. })
        ));
    }

    #[test]
    fn registry_fills_any_title_within_budget() {
        let v = tiny_vocab(&["w"]);
        let max_len = 64;
        for tpl in default_registry() {
            let budget = max_len - tpl.overhead() - 2;
            let title = vec![v.id_or_unk("w"); budget];
            render_prompt(&tpl, &title, None, &v, max_len).unwrap();
        }
    }
}
