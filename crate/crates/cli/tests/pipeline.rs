//! End-to-end pipeline runs through the compiled binary: corpus generation,
//! vocabulary, training, export, indexing, search and evaluation, plus the
//! exit-code contract and run-meta determinism.

use std::path::Path;
use std::process::{Command, Output};

const BIN: &str = env!("CARGO_BIN_EXE_eer");

fn run(args: &[&str]) -> Output {
    Command::new(BIN)
        .args(args)
        .env("EER_LOG", "warn")
        .output()
        .expect("binary spawns")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "command {args:?} failed with {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> i32 {
    run(args).status.code().expect("exit code")
}

fn s(p: &Path) -> String {
    p.display().to_string()
}

#[test]
fn full_pipeline_runs_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let corpus = root.join("corpus");
    let train_dir = s(&corpus.join("train"));
    let eval_dir = s(&corpus.join("eval"));

    ok(&[
        "gen-corpus",
        "--events",
        "8",
        "--seed",
        "7",
        "--test-fraction",
        "0.25",
        "--out",
        &s(&corpus),
    ]);
    for split in ["train", "eval"] {
        for f in ["documents.jsonl", "queries.jsonl", "pairs.jsonl", "events.jsonl"] {
            assert!(corpus.join(split).join(f).exists(), "{split}/{f} missing");
        }
    }
    assert!(corpus.join("run-meta.json").exists());

    let vocab_dir = root.join("vocab");
    ok(&["build-vocab", "--corpus", &train_dir, "--out", &s(&vocab_dir)]);
    let vocab = s(&vocab_dir.join("vocab.json"));

    let events_out = root.join("events");
    ok(&["extract-events", "--corpus", &train_dir, "--out", &s(&events_out)]);
    assert!(events_out.join("events-extracted.jsonl").exists());

    let model_dir = root.join("model");
    let out = ok(&[
        "train",
        "--corpus",
        &train_dir,
        "--eval-corpus",
        &eval_dir,
        "--vocab",
        &vocab,
        "--seed",
        "3",
        "--epochs",
        "1",
        "--toggle",
        "CL,GD",
        "--out",
        &s(&model_dir),
    ]);
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("base+CL+GD"), "stdout: {stdout}");
    let final_ckpt = model_dir.join("checkpoint-final");
    assert!(final_ckpt.exists());
    assert!(model_dir.join("train_log.jsonl").exists());
    assert!(model_dir.join("run-meta.json").exists());

    let pack_dir = root.join("pack");
    ok(&["export", "--checkpoint", &s(&final_ckpt), "--out", &s(&pack_dir)]);

    let mined = root.join("mined");
    ok(&[
        "mine-negatives",
        "--corpus",
        &train_dir,
        "--checkpoint",
        &s(&pack_dir),
        "--vocab",
        &vocab,
        "--seed",
        "5",
        "--k",
        "20",
        "--m",
        "2",
        "--out",
        &s(&mined),
    ]);
    assert!(mined.join("examples.jsonl").exists());

    let index_dir = root.join("index");
    ok(&[
        "index",
        "--checkpoint",
        &s(&pack_dir),
        "--corpus",
        &eval_dir,
        "--vocab",
        &vocab,
        "--out",
        &s(&index_dir),
    ]);

    let hits = ok(&[
        "search",
        "--index",
        &s(&index_dir),
        "--checkpoint",
        &s(&pack_dir),
        "--vocab",
        &vocab,
        "--query",
        "alpha beta",
        "--k",
        "3",
    ]);
    let lines = String::from_utf8_lossy(&hits.stdout);
    assert_eq!(lines.lines().count(), 3, "top-3 lines: {lines}");

    let search_out = root.join("searchout");
    ok(&[
        "search",
        "--index",
        &s(&index_dir),
        "--checkpoint",
        &s(&pack_dir),
        "--vocab",
        &vocab,
        "--queries",
        &s(&corpus.join("eval/queries.jsonl")),
        "--k",
        "10",
        "--out",
        &s(&search_out),
    ]);
    let run_file = search_out.join("run.tsv");
    assert!(run_file.exists());

    let eval_out = root.join("evalout");
    let report_out = ok(&[
        "eval",
        "--run",
        &s(&run_file),
        "--corpus",
        &eval_dir,
        "--ks",
        "1,10",
        "--out",
        &s(&eval_out),
    ]);
    let table = String::from_utf8_lossy(&report_out.stdout);
    assert!(table.contains("R@10"), "table: {table}");
    let report: serde_json::Value =
        serde_json::from_slice(&std::fs::read(eval_out.join("report.json")).unwrap()).unwrap();
    assert!(report["n_queries"].as_u64().unwrap() > 0);

    let emb_out = root.join("emb");
    ok(&[
        "export-embeddings",
        "--checkpoint",
        &s(&pack_dir),
        "--vocab",
        &vocab,
        "--corpus",
        &eval_dir,
        "--source",
        "documents",
        "--out",
        &s(&emb_out),
    ]);
    let tsv = std::fs::read_to_string(emb_out.join("embeddings.tsv")).unwrap();
    assert!(tsv.lines().count() > 0);
}

#[test]
fn identical_invocations_write_identical_run_meta() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();
    let gen = |out: &Path| {
        ok(&[
            "gen-corpus",
            "--events",
            "6",
            "--seed",
            "11",
            "--out",
            &s(out),
        ]);
        std::fs::read(out.join("run-meta.json")).unwrap()
    };
    let c1 = root.join("c1");
    let c2 = root.join("c2");
    assert_eq!(gen(&c1), gen(&c2), "corpus generation must be reproducible");

    let vocab_dir = root.join("vocab");
    ok(&["build-vocab", "--corpus", &s(&c1), "--out", &s(&vocab_dir)]);
    let vocab = s(&vocab_dir.join("vocab.json"));
    let train = |out: &Path| {
        ok(&[
            "train",
            "--corpus",
            &s(&c1),
            "--vocab",
            &vocab,
            "--seed",
            "2",
            "--epochs",
            "1",
            "--toggle",
            "CL",
            "--out",
            &s(out),
        ]);
        std::fs::read(out.join("run-meta.json")).unwrap()
    };
    let m1 = train(&root.join("m1"));
    let m2 = train(&root.join("m2"));
    assert_eq!(m1, m2, "training must be reproducible per seed");
}

#[test]
fn exit_codes_separate_usage_runtime_and_success() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path();

    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["no-such-command"]), 1);
    assert_eq!(code(&["gen-corpus", "--events", "5"]), 1, "missing --seed and --out");
    assert_eq!(
        code(&["gen-corpus", "--events", "5", "--seed", "1", "--frobnicate", "--out", "x"]),
        1,
        "unknown flag"
    );
    assert_eq!(
        code(&["build-vocab", "--corpus", &s(&root.join("absent")), "--out", &s(&root.join("v"))]),
        1,
        "missing input"
    );

    // A genuine runtime failure: training that diverges mid-run.
    let corpus = root.join("c");
    ok(&["gen-corpus", "--events", "6", "--seed", "1", "--out", &s(&corpus)]);
    let vdir = root.join("v");
    ok(&["build-vocab", "--corpus", &s(&corpus), "--out", &s(&vdir)]);
    let out = run(&[
        "train",
        "--corpus",
        &s(&corpus),
        "--vocab",
        &s(&vdir.join("vocab.json")),
        "--seed",
        "1",
        "--epochs",
        "4",
        "--toggle",
        "CL,GD",
        "--learning-rate",
        "1e20",
        "--out",
        &s(&root.join("m")),
    ]);
    assert_eq!(out.status.code(), Some(2), "divergence is a runtime failure");
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("diverged"),
        "stderr names the divergence"
    );
    assert!(
        root.join("m/checkpoint-final").exists(),
        "last good checkpoint is kept"
    );
    // No --seed anywhere for a randomized stage is a usage error.
    assert_eq!(
        code(&[
            "train",
            "--corpus",
            &s(&corpus),
            "--vocab",
            &s(&vdir.join("vocab.json")),
            "--out",
            &s(&root.join("m2")),
        ]),
        1
    );
}
