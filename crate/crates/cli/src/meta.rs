//! Every subcommand writes a `run-meta.json` under its output directory:
//! the resolved configuration, input artifact hashes and output artifact
//! hashes. Two runs with byte-identical run-meta produced byte-identical
//! primary outputs.

use eer_core::util::{atomic_write, sha256_hex};
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::Path;

/// Output files that legitimately differ between identical runs (wall-clock
/// timings) and are therefore excluded from the output hash set.
const UNHASHED_OUTPUTS: &[&str] = &["run-meta.json", "epochs.jsonl"];

#[derive(Debug, Serialize)]
pub struct RunMeta {
    pub command: String,
    pub config: serde_json::Value,
    pub inputs: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub stats: BTreeMap<String, serde_json::Value>,
}

impl RunMeta {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        RunMeta {
            command: command.to_string(),
            config,
            inputs: BTreeMap::new(),
            outputs: BTreeMap::new(),
            stats: BTreeMap::new(),
        }
    }

    pub fn input_file(&mut self, label: &str, path: &Path) -> std::io::Result<()> {
        let body = std::fs::read(path)?;
        self.inputs.insert(label.to_string(), sha256_hex(&body));
        Ok(())
    }

    /// Hash every file under `dir`, keyed `label/<relative path>`.
    pub fn input_dir(&mut self, label: &str, dir: &Path) -> std::io::Result<()> {
        for (rel, hash) in hash_tree(dir)? {
            self.inputs.insert(format!("{label}/{rel}"), hash);
        }
        Ok(())
    }

    pub fn stat(&mut self, key: &str, value: impl Serialize) {
        self.stats.insert(
            key.to_string(),
            serde_json::to_value(value).expect("stat serializes"),
        );
    }

    /// Hash the output tree and write `run-meta.json` at its root.
    pub fn finish(mut self, out_dir: &Path) -> std::io::Result<()> {
        std::fs::create_dir_all(out_dir)?;
        self.outputs = hash_tree(out_dir)?
            .into_iter()
            .filter(|(rel, _)| {
                let name = rel.rsplit('/').next().unwrap_or(rel);
                !UNHASHED_OUTPUTS.contains(&name)
            })
            .collect();
        let body = serde_json::to_vec_pretty(&self)?;
        atomic_write(&out_dir.join("run-meta.json"), &body)
    }
}

/// Relative path -> content hash for every file under `root`, sorted.
fn hash_tree(root: &Path) -> std::io::Result<BTreeMap<String, String>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir)? {
            let path = entry?.path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path
                    .strip_prefix(root)
                    .expect("under root")
                    .components()
                    .map(|c| c.as_os_str().to_string_lossy())
                    .collect::<Vec<_>>()
                    .join("/");
                out.insert(rel, sha256_hex(&std::fs::read(&path)?));
            }
        }
    }
    Ok(out)
}
