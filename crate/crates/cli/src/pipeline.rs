//! Implementations behind the subcommands. Inputs are loaded and validated
//! first (failures exit 1), then the computation runs (failures exit 2) and
//! a run-meta manifest is written last.

use crate::meta::RunMeta;
use crate::{invalid, Classify, CliError, Command, EmbeddingSource, EventSourceArg};
use eer_core::corpus::{
    generate_corpus, load_corpus, save_corpus, split_by_event, GeneratorSpec, Query,
};
use eer_core::eval::{evaluate_run, export_embeddings, write_run, Qrels};
use eer_core::mining::{save_examples, MiningConfig};
use eer_core::model::{load_checkpoint, save_checkpoint, EncoderConfig, Model, TOWER_QUERY, TOWER_TITLE};
use eer_core::retrieval::{build_index, load_index, save_index, search, RankedList};
use eer_core::textproc::{
    default_registry, extract_event_rule, Vocab, VerbLexicon,
};
use eer_core::trainer::{
    config_hash, mine_examples, run_ablation_suite, run_prompt_search, train, EventSource,
    Toggles, TrainConfig,
};
use eer_core::util::{read_jsonl_numbered, sha256_hex, write_jsonl};
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::str::FromStr;

pub fn dispatch(cmd: Command) -> Result<(), CliError> {
    match cmd {
        Command::GenCorpus(a) => gen_corpus(a),
        Command::BuildVocab(a) => build_vocab(a),
        Command::ExtractEvents(a) => extract_events(a),
        Command::MineNegatives(a) => mine_negatives(a),
        Command::Train(a) => run_train(a),
        Command::Ablate(a) => ablate(a),
        Command::PromptSearch(a) => prompt_search(a),
        Command::Export(a) => export(a),
        Command::Index(a) => index(a),
        Command::Search(a) => run_search(a),
        Command::Eval(a) => eval(a),
        Command::ExportEmbeddings(a) => embeddings(a),
    }
}

fn parse_list<T: FromStr>(s: &str, what: &str) -> Result<Vec<T>, CliError>
where
    T::Err: std::fmt::Display,
{
    let items: Result<Vec<T>, _> = s
        .split(',')
        .filter(|p| !p.trim().is_empty())
        .map(|p| p.trim().parse::<T>())
        .collect();
    match items {
        Ok(v) if v.is_empty() => Err(invalid(format!("{what} list is empty"))),
        Ok(v) => Ok(v),
        Err(e) => Err(invalid(format!("bad {what} list {s:?}: {e}"))),
    }
}

/// Toggle names are applied left to right on top of the pairwise base.
fn parse_toggles(s: &str) -> Result<Toggles, CliError> {
    let mut t = Toggles::base();
    for part in s.split(',').filter(|p| !p.trim().is_empty()) {
        match part.trim().to_ascii_uppercase().as_str() {
            "CL" => t.cl = true,
            "PAIR" => t.pair = true,
            "GD" => t.gd = true,
            "GP" => t.gp = true,
            "QER" => t.qer = true,
            "ALL" | "EER" => t = Toggles::all(),
            "NONE" => t = Toggles::none(),
            other => {
                return Err(invalid(format!(
                    "unknown toggle {other:?} (expected CL, PAIR, GD, GP, QER, ALL or NONE)"
                )))
            }
        }
    }
    Ok(t)
}

fn load_vocab(path: &Path) -> Result<Vocab, CliError> {
    Vocab::load(path).invalid()
}

fn load_model(path: &Path, vocab: &Vocab) -> Result<Model<f32>, CliError> {
    load_checkpoint::<f32>(path, Some(&vocab.fingerprint())).invalid()
}

// ---------------------------------------------------------------------------

fn gen_corpus(a: crate::GenCorpusArgs) -> Result<(), CliError> {
    let spec = GeneratorSpec {
        n_events: a.events,
        queries_per_event: a.queries_per_event,
        titles_per_event: a.titles_per_event,
        negatives_per_positive: a.negatives_per_positive,
        entity_pool: a.entity_pool,
        verb_pool: a.verb_pool,
        object_pool: a.object_pool,
        seed: a.seed,
        ..GeneratorSpec::default()
    };
    spec.validate().invalid()?;
    if let Some(f) = a.test_fraction {
        if !(f > 0.0 && f < 1.0) {
            return Err(invalid(format!("--test-fraction must be in (0,1), got {f}")));
        }
    }
    let corpus = generate_corpus(&spec).runtime()?;
    let mut meta = RunMeta::new(
        "gen-corpus",
        serde_json::json!({ "spec": spec, "test_fraction": a.test_fraction }),
    );
    match a.test_fraction {
        None => {
            save_corpus(&corpus, &a.out).runtime()?;
            meta.stat("documents", corpus.documents.len());
            meta.stat("queries", corpus.queries.len());
            meta.stat("pairs", corpus.pairs.len());
        }
        Some(f) => {
            let (train_c, eval_c) = split_by_event(&corpus, f, a.seed).runtime()?;
            save_corpus(&train_c, &a.out.join("train")).runtime()?;
            save_corpus(&eval_c, &a.out.join("eval")).runtime()?;
            meta.stat("train_documents", train_c.documents.len());
            meta.stat("train_queries", train_c.queries.len());
            meta.stat("eval_documents", eval_c.documents.len());
            meta.stat("eval_queries", eval_c.queries.len());
        }
    }
    meta.finish(&a.out).runtime()?;
    println!(
        "generated {} documents, {} queries, {} pairs under {}",
        corpus.documents.len(),
        corpus.queries.len(),
        corpus.pairs.len(),
        a.out.display()
    );
    Ok(())
}

fn build_vocab(a: crate::BuildVocabArgs) -> Result<(), CliError> {
    if a.min_freq == 0 {
        return Err(invalid("--min-freq must be >= 1"));
    }
    let corpus = load_corpus(&a.corpus).invalid()?;
    let built = eer_core::textproc::corpus_vocab(&corpus, a.min_freq, a.prompt_slots).invalid()?;
    if built.content_empty {
        log::warn!(
            "no content token reaches min_freq {}; vocabulary is reserved tokens only",
            a.min_freq
        );
    }
    let vocab_path = a.out.join("vocab.json");
    std::fs::create_dir_all(&a.out).runtime()?;
    built.vocab.save(&vocab_path).runtime()?;
    let mut meta = RunMeta::new(
        "build-vocab",
        serde_json::json!({ "min_freq": a.min_freq, "prompt_slots": a.prompt_slots }),
    );
    meta.input_dir("corpus", &a.corpus).runtime()?;
    meta.stat("vocab_size", built.vocab.len());
    meta.stat("content_empty", built.content_empty);
    meta.finish(&a.out).runtime()?;
    println!(
        "vocabulary of {} tokens written to {}",
        built.vocab.len(),
        vocab_path.display()
    );
    Ok(())
}

#[derive(Serialize)]
struct ExtractedRow {
    doc_id: String,
    subject: String,
    trigger: String,
    object: String,
}

fn extract_events(a: crate::ExtractEventsArgs) -> Result<(), CliError> {
    let corpus = load_corpus(&a.corpus).invalid()?;
    let lexicon = match &a.lexicon {
        Some(path) => VerbLexicon::load(path).invalid()?,
        None => {
            if corpus.gold_events.is_empty() {
                return Err(invalid(
                    "corpus has no gold events to derive a trigger lexicon from; pass --lexicon",
                ));
            }
            VerbLexicon::new(corpus.gold_events.values().map(|e| e.trigger.clone()))
        }
    };
    let mut rows = Vec::new();
    for d in &corpus.documents {
        if let Some(e) = extract_event_rule(&d.title, &lexicon) {
            rows.push(ExtractedRow {
                doc_id: d.doc_id.clone(),
                subject: e.subject,
                trigger: e.trigger,
                object: e.object,
            });
        }
    }
    std::fs::create_dir_all(&a.out).runtime()?;
    write_jsonl(&a.out.join("events-extracted.jsonl"), &rows).runtime()?;
    let mut meta = RunMeta::new(
        "extract-events",
        serde_json::json!({ "lexicon": a.lexicon.is_some() }),
    );
    meta.input_dir("corpus", &a.corpus).runtime()?;
    if let Some(path) = &a.lexicon {
        meta.input_file("lexicon", path).runtime()?;
    }
    meta.stat("documents", corpus.documents.len());
    meta.stat("extracted", rows.len());
    meta.finish(&a.out).runtime()?;
    println!(
        "extracted events for {} of {} titles",
        rows.len(),
        corpus.documents.len()
    );
    Ok(())
}

fn mine_negatives(a: crate::MineNegativesArgs) -> Result<(), CliError> {
    let vocab = load_vocab(&a.vocab)?;
    let model = load_model(&a.checkpoint, &vocab)?;
    let corpus = load_corpus(&a.corpus).invalid()?;
    let cfg = MiningConfig {
        k: a.k,
        m: a.m,
        lower: a.lower,
        upper: a.upper,
        seed: a.seed,
    };
    cfg.validate().invalid()?;
    let examples = mine_examples(&model, &corpus, &vocab, &cfg).runtime()?;
    std::fs::create_dir_all(&a.out).runtime()?;
    save_examples(&examples, &a.out.join("examples.jsonl")).runtime()?;
    let mut meta = RunMeta::new("mine-negatives", serde_json::to_value(&cfg).runtime()?);
    meta.input_dir("corpus", &a.corpus).runtime()?;
    meta.input_dir("checkpoint", &a.checkpoint).runtime()?;
    meta.input_file("vocab", &a.vocab).runtime()?;
    meta.stat("examples", examples.len());
    meta.stat(
        "hard_negatives",
        examples.iter().map(|e| e.hard_neg_doc_ids.len()).sum::<usize>(),
    );
    meta.finish(&a.out).runtime()?;
    println!("wrote {} training examples", examples.len());
    Ok(())
}

/// Flags override the config file; without a config file the desk-scale
/// defaults sized to the vocabulary are used and --seed becomes mandatory.
fn resolve_train_config(
    config: Option<&PathBuf>,
    seed: Option<u64>,
    vocab: &Vocab,
) -> Result<TrainConfig, CliError> {
    let mut cfg = match config {
        Some(path) => {
            let body = std::fs::read(path).invalid()?;
            serde_json::from_slice::<TrainConfig>(&body).invalid()?
        }
        None => {
            if seed.is_none() {
                return Err(invalid(
                    "training is randomized: pass --seed or a --config with a seed",
                ));
            }
            TrainConfig::desk(EncoderConfig::desk(vocab.len(), vocab.n_prompt_slots()))
        }
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn run_train(a: crate::TrainArgs) -> Result<(), CliError> {
    let vocab = load_vocab(&a.vocab)?;
    let corpus = load_corpus(&a.corpus).invalid()?;
    let eval_corpus = match &a.eval_corpus {
        Some(dir) => Some(load_corpus(dir).invalid()?),
        None => None,
    };
    let mut cfg = resolve_train_config(a.config.as_ref(), a.seed, &vocab)?;
    if let Some(t) = &a.toggle {
        cfg.toggles = parse_toggles(t)?;
    }
    if let Some(es) = a.event_source {
        cfg.event_source = match es {
            EventSourceArg::Gold => EventSource::Gold,
            EventSourceArg::Decoded => EventSource::Decoded,
        };
    }
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    if let Some(b) = a.batch_size {
        cfg.batch_size = b;
    }
    if let Some(lr) = a.learning_rate {
        cfg.learning_rate = lr;
    }
    if let Some(t) = &a.template_id {
        cfg.template_id = t.clone();
    }
    cfg.validate().invalid()?;

    let outcome = train::<f32>(&cfg, &corpus, eval_corpus.as_ref(), &vocab, Some(&a.out))
        .runtime()?;
    for e in &outcome.log.epochs {
        let eval_part = e
            .eval
            .as_ref()
            .map(|r| {
                format!(
                    "  R@10 {:.4}  MRR@10 {:.4}",
                    r.r_at.get(&10).copied().unwrap_or(0.0),
                    r.mrr_at_10
                )
            })
            .unwrap_or_default();
        println!(
            "epoch {}  loss {:.4}{}",
            e.epoch, e.mean_loss.total, eval_part
        );
    }

    let mut meta = RunMeta::new("train", serde_json::to_value(&cfg).runtime()?);
    meta.input_dir("corpus", &a.corpus).runtime()?;
    if let Some(dir) = &a.eval_corpus {
        meta.input_dir("eval_corpus", dir).runtime()?;
    }
    meta.input_file("vocab", &a.vocab).runtime()?;
    meta.stat("label", cfg.toggles.label());
    meta.stat("config_hash", config_hash(&cfg));
    meta.stat("steps", outcome.log.steps.len());
    if let Some(s) = outcome.diverged_at_step {
        meta.stat("diverged_at_step", s);
    }
    meta.finish(&a.out).runtime()?;

    if let Some(s) = outcome.diverged_at_step {
        return Err(CliError::Runtime(anyhow::anyhow!(
            "training diverged at step {s}; the last good checkpoint is kept under {}",
            a.out.display()
        )));
    }
    println!(
        "trained {} ({} steps) into {}",
        cfg.toggles.label(),
        outcome.log.steps.len(),
        a.out.display()
    );
    Ok(())
}

fn ablate(a: crate::AblateArgs) -> Result<(), CliError> {
    let vocab = load_vocab(&a.vocab)?;
    let corpus = load_corpus(&a.corpus).invalid()?;
    let eval_corpus = load_corpus(&a.eval_corpus).invalid()?;
    let seeds: Vec<u64> = parse_list(&a.seeds, "seed")?;
    let mut cfg = resolve_train_config(a.config.as_ref(), Some(seeds[0]), &vocab)?;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    cfg.validate().invalid()?;
    let report =
        run_ablation_suite::<f32>(&cfg, &corpus, &eval_corpus, &vocab, &seeds, Some(&a.out))
            .runtime()?;
    print!("{}", report.to_tsv());
    let mut meta = RunMeta::new(
        "ablate",
        serde_json::json!({ "base": cfg, "seeds": seeds }),
    );
    meta.input_dir("corpus", &a.corpus).runtime()?;
    meta.input_dir("eval_corpus", &a.eval_corpus).runtime()?;
    meta.input_file("vocab", &a.vocab).runtime()?;
    meta.finish(&a.out).runtime()?;
    Ok(())
}

fn prompt_search(a: crate::PromptSearchArgs) -> Result<(), CliError> {
    let vocab = load_vocab(&a.vocab)?;
    let corpus = load_corpus(&a.corpus).invalid()?;
    let eval_corpus = load_corpus(&a.eval_corpus).invalid()?;
    let mut cfg = resolve_train_config(a.config.as_ref(), a.seed, &vocab)?;
    if let Some(e) = a.epochs {
        cfg.epochs = e;
    }
    let ids: Vec<String> = match &a.templates {
        Some(s) => parse_list(s, "template")?,
        None => default_registry().into_iter().map(|t| t.id).collect(),
    };
    cfg.validate().invalid()?;
    let report =
        run_prompt_search::<f32>(&cfg, &ids, &corpus, &eval_corpus, &vocab, Some(&a.out))
            .runtime()?;
    print!("{}", report.to_tsv());
    let mut meta = RunMeta::new(
        "prompt-search",
        serde_json::json!({ "base": cfg, "templates": ids }),
    );
    meta.input_dir("corpus", &a.corpus).runtime()?;
    meta.input_dir("eval_corpus", &a.eval_corpus).runtime()?;
    meta.input_file("vocab", &a.vocab).runtime()?;
    meta.finish(&a.out).runtime()?;
    Ok(())
}

fn export(a: crate::ExportArgs) -> Result<(), CliError> {
    let model = load_checkpoint::<f32>(&a.checkpoint, None).invalid()?;
    let pack = model.export_inference();
    save_checkpoint(&pack, &a.out).runtime()?;
    let mut meta = RunMeta::new("export", serde_json::json!({}));
    meta.input_dir("checkpoint", &a.checkpoint).runtime()?;
    meta.stat("tensors_in", model.tensors.len());
    meta.stat("tensors_out", pack.tensors.len());
    meta.finish(&a.out).runtime()?;
    println!(
        "inference pack with {} tensors written to {}",
        pack.tensors.len(),
        a.out.display()
    );
    Ok(())
}

fn index(a: crate::IndexArgs) -> Result<(), CliError> {
    let vocab = load_vocab(&a.vocab)?;
    let pack = load_model(&a.checkpoint, &vocab)?;
    let corpus = load_corpus(&a.corpus).invalid()?;
    let idx = build_index(&pack, &corpus.documents, &vocab).runtime()?;
    save_index(&idx, &a.out).runtime()?;
    let mut meta = RunMeta::new("index", serde_json::json!({}));
    meta.input_dir("checkpoint", &a.checkpoint).runtime()?;
    meta.input_dir("corpus", &a.corpus).runtime()?;
    meta.input_file("vocab", &a.vocab).runtime()?;
    meta.stat("documents", idx.len());
    meta.finish(&a.out).runtime()?;
    println!("indexed {} documents into {}", idx.len(), a.out.display());
    Ok(())
}

fn run_search(a: crate::SearchArgs) -> Result<(), CliError> {
    if a.k == 0 {
        return Err(invalid("--k must be >= 1"));
    }
    let vocab = load_vocab(&a.vocab)?;
    let pack = load_model(&a.checkpoint, &vocab)?;
    let idx = load_index::<f32>(&a.index).invalid()?;
    match (&a.query, &a.queries) {
        (Some(text), None) => {
            let ranked = search(&idx, &pack, &vocab, text, a.k).runtime()?;
            for (rank, hit) in ranked.hits.iter().enumerate() {
                println!("{}\t{}\t{:.6}", rank + 1, hit.doc_id, hit.score);
            }
            if let Some(out) = &a.out {
                let mut runs = BTreeMap::new();
                runs.insert("q".to_string(), ranked);
                std::fs::create_dir_all(out).runtime()?;
                write_run(&runs, &out.join("run.tsv")).runtime()?;
                let mut meta = RunMeta::new("search", serde_json::json!({ "k": a.k }));
                meta.input_dir("index", &a.index).runtime()?;
                meta.finish(out).runtime()?;
            }
        }
        (None, Some(path)) => {
            let out = a
                .out
                .as_ref()
                .ok_or_else(|| invalid("--queries mode writes a run file: pass --out"))?;
            let rows: Vec<(usize, Query)> = read_jsonl_numbered(path).invalid()?;
            let mut runs: BTreeMap<String, RankedList> = BTreeMap::new();
            for (line, q) in &rows {
                if runs.contains_key(&q.query_id) {
                    return Err(invalid(format!(
                        "{}:{line}: duplicate query_id {:?}",
                        path.display(),
                        q.query_id
                    )));
                }
                let ranked = search(&idx, &pack, &vocab, &q.text, a.k).runtime()?;
                runs.insert(q.query_id.clone(), ranked);
            }
            std::fs::create_dir_all(out).runtime()?;
            write_run(&runs, &out.join("run.tsv")).runtime()?;
            let mut meta = RunMeta::new("search", serde_json::json!({ "k": a.k }));
            meta.input_dir("index", &a.index).runtime()?;
            meta.input_dir("checkpoint", &a.checkpoint).runtime()?;
            meta.input_file("vocab", &a.vocab).runtime()?;
            meta.input_file("queries", path).runtime()?;
            meta.stat("queries", rows.len());
            meta.finish(out).runtime()?;
            println!("wrote run for {} queries to {}", rows.len(), out.display());
        }
        _ => return Err(invalid("pass exactly one of --query or --queries")),
    }
    Ok(())
}

fn eval(a: crate::EvalArgs) -> Result<(), CliError> {
    let ks: Vec<usize> = parse_list(&a.ks, "k")?;
    if ks.contains(&0) {
        return Err(invalid("recall cutoffs must be >= 1"));
    }
    let qrels = match (&a.qrels, &a.corpus) {
        (Some(path), None) => Qrels::load(path).invalid()?,
        (None, Some(dir)) => Qrels::from_pairs(&load_corpus(dir).invalid()?.pairs),
        _ => return Err(invalid("pass exactly one of --qrels or --corpus")),
    };
    let mut report = evaluate_run(&a.run, &qrels, &ks).invalid()?;
    let config = serde_json::json!({
        "ks": ks,
        "run": sha256_hex(&std::fs::read(&a.run).invalid()?),
        "qrels": qrels_hash(&a)?,
    });
    report.config_hash = sha256_hex(config.to_string().as_bytes());

    println!("queries  {}", report.n_queries);
    for (k, v) in &report.r_at {
        println!("R@{k:<6} {v:.4}");
    }
    println!("MRR@10   {:.4}", report.mrr_at_10);
    match report.auc {
        Some(auc) => println!("AUC      {auc:.4}"),
        None => println!("AUC      n/a (needs judged positives and negatives)"),
    }

    if let Some(out) = &a.out {
        std::fs::create_dir_all(out).runtime()?;
        eer_core::util::atomic_write(
            &out.join("report.json"),
            &serde_json::to_vec_pretty(&report).runtime()?,
        )
        .runtime()?;
        let mut meta = RunMeta::new("eval", config);
        meta.input_file("run", &a.run).runtime()?;
        if let Some(path) = &a.qrels {
            meta.input_file("qrels", path).runtime()?;
        }
        if let Some(dir) = &a.corpus {
            meta.input_dir("corpus", dir).runtime()?;
        }
        meta.finish(out).runtime()?;
    }
    Ok(())
}

fn qrels_hash(a: &crate::EvalArgs) -> Result<String, CliError> {
    match (&a.qrels, &a.corpus) {
        (Some(path), _) => Ok(sha256_hex(&std::fs::read(path).invalid()?)),
        (_, Some(dir)) => Ok(sha256_hex(
            &std::fs::read(dir.join("pairs.jsonl")).invalid()?,
        )),
        _ => unreachable!("validated by caller"),
    }
}

fn embeddings(a: crate::ExportEmbeddingsArgs) -> Result<(), CliError> {
    let vocab = load_vocab(&a.vocab)?;
    let pack = load_model(&a.checkpoint, &vocab)?;
    let corpus = load_corpus(&a.corpus).invalid()?;
    let (tower, items): (&str, Vec<(String, String)>) = match a.source {
        EmbeddingSource::Documents => (
            TOWER_TITLE,
            corpus
                .documents
                .iter()
                .map(|d| (d.doc_id.clone(), d.title.clone()))
                .collect(),
        ),
        EmbeddingSource::Queries => (
            TOWER_QUERY,
            corpus
                .queries
                .iter()
                .map(|q| (q.query_id.clone(), q.text.clone()))
                .collect(),
        ),
    };
    std::fs::create_dir_all(&a.out).runtime()?;
    let n = export_embeddings(&pack, tower, &items, &vocab, &a.out.join("embeddings.tsv"))
        .runtime()?;
    let mut meta = RunMeta::new(
        "export-embeddings",
        serde_json::json!({ "source": items_label(a.source) }),
    );
    meta.input_dir("checkpoint", &a.checkpoint).runtime()?;
    meta.input_dir("corpus", &a.corpus).runtime()?;
    meta.input_file("vocab", &a.vocab).runtime()?;
    meta.stat("rows", n);
    meta.finish(&a.out).runtime()?;
    println!("wrote {n} embeddings to {}", a.out.display());
    Ok(())
}

fn items_label(s: EmbeddingSource) -> &'static str {
    match s {
        EmbeddingSource::Documents => "documents",
        EmbeddingSource::Queries => "queries",
    }
}
