//! Dual-tower encoders plus an encoder-initialized generative decoder.
//!
//! All parameters live in one name-keyed tensor store; names are stable and
//! double as the checkpoint manifest order. Prefixes: `query.` and `title.`
//! for the towers, `decoder.` for the generation head, `prompt_emb` for the
//! continuous-prompt table. In tied mode `title.*` resolves to `query.*`.

pub mod forward;

use crate::scalar::{PackedScalar, Scalar};
use crate::util::atomic_write;
use ndarray::Array2;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::Path;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pooling {
    Cls,
    Mean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub n_layers: usize,
    pub hidden_size: usize,
    pub n_heads: usize,
    pub ff_size: usize,
    pub max_len: usize,
    pub vocab_size: usize,
    pub n_prompt_slots: usize,
    pub dropout: f64,
    pub pooling: Pooling,
    pub tie_towers: bool,
    pub seed: u64,
}

impl EncoderConfig {
    /// Small configuration that trains in seconds on a CPU.
    pub fn desk(vocab_size: usize, n_prompt_slots: usize) -> Self {
        EncoderConfig {
            n_layers: 2,
            hidden_size: 64,
            n_heads: 4,
            ff_size: 256,
            max_len: 64,
            vocab_size,
            n_prompt_slots,
            dropout: 0.0,
            pooling: Pooling::Cls,
            tie_towers: false,
            seed: 0,
        }
    }

    /// Published reference scale (12-layer, 768-hidden towers). Recorded for
    /// documentation; nothing here loads pretrained weights for it.
    pub fn paper_reference(vocab_size: usize, n_prompt_slots: usize) -> Self {
        EncoderConfig {
            n_layers: 12,
            hidden_size: 768,
            n_heads: 12,
            ff_size: 3072,
            max_len: 512,
            vocab_size,
            n_prompt_slots,
            dropout: 0.1,
            pooling: Pooling::Cls,
            tie_towers: false,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        if self.hidden_size == 0 || self.n_heads == 0 || self.hidden_size % self.n_heads != 0 {
            return Err(ModelError::BadConfig(format!(
                "hidden_size {} must be a positive multiple of n_heads {}",
                self.hidden_size, self.n_heads
            )));
        }
        if self.n_layers == 0 || self.ff_size == 0 {
            return Err(ModelError::BadConfig("layers and ff_size must be >= 1".into()));
        }
        if self.max_len < 4 {
            return Err(ModelError::BadConfig("max_len must be >= 4".into()));
        }
        if self.vocab_size < 5 + self.n_prompt_slots {
            return Err(ModelError::BadConfig(format!(
                "vocab_size {} cannot hold reserved ids and {} prompt slots",
                self.vocab_size, self.n_prompt_slots
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(ModelError::BadConfig("dropout must be in [0,1)".into()));
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ModelError {
    #[error("invalid model config: {0}")]
    BadConfig(String),
    #[error("sequence length {len} exceeds max_len {max_len}")]
    SequenceTooLong { len: usize, max_len: usize },
    #[error("checkpoint has no decoder parameters")]
    DecoderMissing,
    #[error("bad input: {0}")]
    BadInput(String),
    #[error("vocab fingerprint mismatch: checkpoint has {found}, expected {expected}")]
    FingerprintMismatch { expected: String, found: String },
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Name-keyed parameter store with deterministic iteration order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensors<T: Scalar>(BTreeMap<String, Array2<T>>);

impl<T: Scalar> Default for Tensors<T> {
    fn default() -> Self {
        Tensors(BTreeMap::new())
    }
}

impl<T: Scalar> Tensors<T> {
    pub fn get(&self, name: &str) -> &Array2<T> {
        self.0
            .get(name)
            .unwrap_or_else(|| panic!("missing tensor {name}"))
    }

    pub fn get_mut(&mut self, name: &str) -> &mut Array2<T> {
        self.0
            .get_mut(name)
            .unwrap_or_else(|| panic!("missing tensor {name}"))
    }

    pub fn try_get(&self, name: &str) -> Option<&Array2<T>> {
        self.0.get(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, value: Array2<T>) {
        self.0.insert(name.into(), value);
    }

    pub fn remove(&mut self, name: &str) -> Option<Array2<T>> {
        self.0.remove(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Array2<T>)> {
        self.0.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&String, &mut Array2<T>)> {
        self.0.iter_mut()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.0.keys()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn n_params(&self) -> usize {
        self.0.values().map(|a| a.len()).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model<T: Scalar> {
    pub config: EncoderConfig,
    pub tensors: Tensors<T>,
    pub vocab_fingerprint: String,
}

pub const TOWER_QUERY: &str = "query";
pub const TOWER_TITLE: &str = "title";
pub const TOWER_DECODER: &str = "decoder";
pub const PROMPT_TABLE: &str = "prompt_emb";

fn normal_tensor<T: Scalar>(seed: u64, name: &str, rows: usize, cols: usize, std: f64) -> Array2<T> {
    let mut rng = crate::util::seeded_rng(seed, name);
    let dist = Normal::new(0.0f64, std).expect("valid normal");
    Array2::from_shape_fn((rows, cols), |_| T::from_f64c(dist.sample(&mut rng)))
}

fn init_tower<T: Scalar>(tensors: &mut Tensors<T>, cfg: &EncoderConfig, prefix: &str) {
    let h = cfg.hidden_size;
    let v = cfg.vocab_size;
    let f = cfg.ff_size;
    let seed = cfg.seed;
    let std = 0.02;
    let mut put_normal = |name: String, rows: usize, cols: usize| {
        let t = normal_tensor(seed, &name, rows, cols, std);
        tensors.insert(name, t);
    };
    put_normal(format!("{prefix}.tok_emb"), v, h);
    put_normal(format!("{prefix}.pos_emb"), cfg.max_len, h);
    for l in 0..cfg.n_layers {
        for w in ["wq", "wk", "wv", "wo"] {
            put_normal(format!("{prefix}.l{l}.attn.{w}"), h, h);
        }
        put_normal(format!("{prefix}.l{l}.ffn.w1"), h, f);
        put_normal(format!("{prefix}.l{l}.ffn.w2"), f, h);
    }
    for l in 0..cfg.n_layers {
        for b in ["bq", "bk", "bv", "bo"] {
            tensors.insert(format!("{prefix}.l{l}.attn.{b}"), Array2::zeros((1, h)));
        }
        tensors.insert(format!("{prefix}.l{l}.ffn.b1"), Array2::zeros((1, f)));
        tensors.insert(format!("{prefix}.l{l}.ffn.b2"), Array2::zeros((1, h)));
        for ln in ["ln1", "ln2"] {
            tensors.insert(format!("{prefix}.l{l}.{ln}.g"), Array2::ones((1, h)));
            tensors.insert(format!("{prefix}.l{l}.{ln}.b"), Array2::zeros((1, h)));
        }
    }
    tensors.insert(format!("{prefix}.lnf.g"), Array2::ones((1, h)));
    tensors.insert(format!("{prefix}.lnf.b"), Array2::zeros((1, h)));
}

impl<T: Scalar> Model<T> {
    /// Initialize the two towers (no decoder yet). Deterministic per seed.
    pub fn init_dual_encoder(
        config: EncoderConfig,
        vocab_fingerprint: String,
    ) -> Result<Self, ModelError> {
        config.validate()?;
        let mut tensors = Tensors::default();
        init_tower(&mut tensors, &config, TOWER_QUERY);
        if !config.tie_towers {
            init_tower(&mut tensors, &config, TOWER_TITLE);
        }
        if config.n_prompt_slots > 0 {
            let t = normal_tensor(
                config.seed,
                PROMPT_TABLE,
                config.n_prompt_slots,
                config.hidden_size,
                0.02,
            );
            tensors.insert(PROMPT_TABLE, t);
        }
        Ok(Model {
            config,
            tensors,
            vocab_fingerprint,
        })
    }

    /// Physical prefix for a logical tower; tied mode aliases title to query.
    pub fn resolve_tower(&self, tower: &str) -> String {
        if tower == TOWER_TITLE && self.config.tie_towers {
            TOWER_QUERY.to_string()
        } else {
            tower.to_string()
        }
    }

    pub fn has_decoder(&self) -> bool {
        self.tensors
            .names()
            .any(|n| n.starts_with("decoder."))
    }

    pub fn require_decoder(&self) -> Result<(), ModelError> {
        if self.has_decoder() {
            Ok(())
        } else {
            Err(ModelError::DecoderMissing)
        }
    }

    /// Copy the title tower's self-attention/FFN/embedding/normalization
    /// parameters into a decoder, then add freshly seeded cross-attention and
    /// output-projection parameters.
    pub fn init_decoder_from_encoder(&mut self) {
        let cfg = self.config.clone();
        let src = self.resolve_tower(TOWER_TITLE);
        let copies: Vec<(String, Array2<T>)> = self
            .tensors
            .iter()
            .filter(|(n, _)| n.starts_with(&format!("{src}.")))
            .map(|(n, t)| {
                let suffix = n.strip_prefix(&format!("{src}.")).unwrap();
                (format!("decoder.{suffix}"), t.clone())
            })
            .collect();
        for (n, t) in copies {
            self.tensors.insert(n, t);
        }
        let h = cfg.hidden_size;
        for l in 0..cfg.n_layers {
            for w in ["wq", "wk", "wv", "wo"] {
                let name = format!("decoder.l{l}.xattn.{w}");
                let t = normal_tensor(cfg.seed, &name, h, h, 0.02);
                self.tensors.insert(name, t);
            }
            for b in ["bq", "bk", "bv", "bo"] {
                self.tensors
                    .insert(format!("decoder.l{l}.xattn.{b}"), Array2::zeros((1, h)));
            }
            self.tensors
                .insert(format!("decoder.l{l}.lnx.g"), Array2::ones((1, h)));
            self.tensors
                .insert(format!("decoder.l{l}.lnx.b"), Array2::zeros((1, h)));
        }
        let out_w = normal_tensor(cfg.seed, "decoder.out.w", h, cfg.vocab_size, 0.02);
        self.tensors.insert("decoder.out.w", out_w);
        self.tensors
            .insert("decoder.out.b", Array2::zeros((1, cfg.vocab_size)));
    }

    /// Retrieval-only copy: towers and prompt table, no decoder.
    pub fn export_inference(&self) -> Model<T> {
        let mut tensors = Tensors::default();
        for (n, t) in self.tensors.iter() {
            if !n.starts_with("decoder.") {
                tensors.insert(n.clone(), t.clone());
            }
        }
        Model {
            config: self.config.clone(),
            tensors,
            vocab_fingerprint: self.vocab_fingerprint.clone(),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct TensorMeta {
    name: String,
    rows: usize,
    cols: usize,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    dtype: String,
    config: EncoderConfig,
    vocab_fingerprint: String,
    has_decoder: bool,
    tensors: Vec<TensorMeta>,
}

/// Checkpoint directory: `manifest.json` + `weights.bin` (little-endian
/// scalars concatenated in manifest order). Bit-exact round trip.
pub fn save_checkpoint<T: Scalar>(model: &Model<T>, dir: &Path) -> Result<(), ModelError> {
    std::fs::create_dir_all(dir)?;
    let mut metas = Vec::new();
    let mut blob: Vec<u8> = Vec::new();
    for (name, tensor) in model.tensors.iter() {
        metas.push(TensorMeta {
            name: name.clone(),
            rows: tensor.nrows(),
            cols: tensor.ncols(),
            offset: blob.len(),
        });
        for v in tensor.iter() {
            v.write_le(&mut blob);
        }
    }
    let manifest = Manifest {
        format_version: 1,
        dtype: <T as PackedScalar>::DTYPE.to_string(),
        config: model.config.clone(),
        vocab_fingerprint: model.vocab_fingerprint.clone(),
        has_decoder: model.has_decoder(),
        tensors: metas,
    };
    atomic_write(&dir.join("manifest.json"), &serde_json::to_vec_pretty(&manifest)?)?;
    atomic_write(&dir.join("weights.bin"), &blob)?;
    Ok(())
}

/// Load a checkpoint; when `expected_fingerprint` is given it must match the
/// manifest's vocab fingerprint.
pub fn load_checkpoint<T: Scalar>(
    dir: &Path,
    expected_fingerprint: Option<&str>,
) -> Result<Model<T>, ModelError> {
    let manifest: Manifest =
        serde_json::from_slice(&std::fs::read(dir.join("manifest.json"))?)?;
    if manifest.format_version != 1 {
        return Err(ModelError::BadCheckpoint(format!(
            "unsupported format_version {}",
            manifest.format_version
        )));
    }
    if manifest.dtype != <T as PackedScalar>::DTYPE {
        return Err(ModelError::BadCheckpoint(format!(
            "dtype mismatch: file has {}, loader expects {}",
            manifest.dtype,
            <T as PackedScalar>::DTYPE
        )));
    }
    if let Some(expected) = expected_fingerprint {
        if manifest.vocab_fingerprint != expected {
            return Err(ModelError::FingerprintMismatch {
                expected: expected.to_string(),
                found: manifest.vocab_fingerprint,
            });
        }
    }
    let blob = std::fs::read(dir.join("weights.bin"))?;
    let width = <T as PackedScalar>::WIDTH;
    let mut tensors = Tensors::default();
    for meta in &manifest.tensors {
        let n = meta.rows * meta.cols;
        let end = meta.offset + n * width;
        if end > blob.len() {
            return Err(ModelError::BadCheckpoint(format!(
                "tensor {} extends past end of weights.bin",
                meta.name
            )));
        }
        let mut data = Vec::with_capacity(n);
        for i in 0..n {
            let at = meta.offset + i * width;
            data.push(T::read_le(&blob[at..at + width]));
        }
        let arr = Array2::from_shape_vec((meta.rows, meta.cols), data)
            .map_err(|e| ModelError::BadCheckpoint(e.to_string()))?;
        tensors.insert(meta.name.clone(), arr);
    }
    manifest.config.validate()?;
    Ok(Model {
        config: manifest.config,
        tensors,
        vocab_fingerprint: manifest.vocab_fingerprint,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> EncoderConfig {
        EncoderConfig {
            seed: 5,
            ..EncoderConfig::desk(64, 4)
        }
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a: Model<f32> = Model::init_dual_encoder(cfg(), "fp".into()).unwrap();
        let b: Model<f32> = Model::init_dual_encoder(cfg(), "fp".into()).unwrap();
        assert_eq!(a, b);
        let c: Model<f32> =
            Model::init_dual_encoder(EncoderConfig { seed: 6, ..cfg() }, "fp".into()).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn towers_are_independent_unless_tied() {
        let m: Model<f32> = Model::init_dual_encoder(cfg(), "fp".into()).unwrap();
        assert_ne!(
            m.tensors.get("query.l0.attn.wq"),
            m.tensors.get("title.l0.attn.wq")
        );
        let tied: Model<f32> =
            Model::init_dual_encoder(EncoderConfig { tie_towers: true, ..cfg() }, "fp".into())
                .unwrap();
        assert!(tied.tensors.try_get("title.tok_emb").is_none());
        assert_eq!(tied.resolve_tower(TOWER_TITLE), TOWER_QUERY);
    }

    #[test]
    fn config_validation_rejects_bad_shapes() {
        let bad = EncoderConfig { n_heads: 5, ..cfg() };
        assert!(bad.validate().is_err());
        let bad = EncoderConfig { vocab_size: 6, ..cfg() };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn decoder_init_copies_self_attention_and_seeds_cross_attention() {
        let mut m: Model<f32> = Model::init_dual_encoder(cfg(), "fp".into()).unwrap();
        assert!(!m.has_decoder());
        m.init_decoder_from_encoder();
        assert!(m.has_decoder());
        for suffix in ["tok_emb", "l0.attn.wq", "l1.ffn.w1", "lnf.g"] {
            assert_eq!(
                m.tensors.get(&format!("decoder.{suffix}")),
                m.tensors.get(&format!("title.{suffix}")),
                "{suffix} not copied"
            );
        }
        let x = m.tensors.get("decoder.l0.xattn.wq");
        assert!(x.iter().any(|v| *v != 0.0));
        assert_ne!(x, m.tensors.get("decoder.l0.attn.wq"));
        assert_ne!(x, m.tensors.get("title.l0.attn.wq"));
    }

    #[test]
    fn export_strips_decoder_and_load_pack_reports_it() {
        let mut m: Model<f32> = Model::init_dual_encoder(cfg(), "fp".into()).unwrap();
        m.init_decoder_from_encoder();
        let pack = m.export_inference();
        assert!(!pack.has_decoder());
        assert!(pack.tensors.try_get("query.tok_emb").is_some());
        assert!(matches!(pack.require_decoder(), Err(ModelError::DecoderMissing)));

        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&pack, dir.path()).unwrap();
        let loaded: Model<f32> = load_checkpoint(dir.path(), None).unwrap();
        assert!(matches!(loaded.require_decoder(), Err(ModelError::DecoderMissing)));
    }

    #[test]
    fn checkpoint_round_trip_is_bitwise() {
        let mut m: Model<f32> = Model::init_dual_encoder(cfg(), "fp".into()).unwrap();
        m.init_decoder_from_encoder();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&m, dir.path()).unwrap();
        let loaded: Model<f32> = load_checkpoint(dir.path(), Some("fp")).unwrap();
        assert_eq!(m.config, loaded.config);
        assert_eq!(m.tensors.len(), loaded.tensors.len());
        for (name, t) in m.tensors.iter() {
            let lt = loaded.tensors.get(name);
            assert_eq!(t.dim(), lt.dim());
            for (a, b) in t.iter().zip(lt.iter()) {
                assert_eq!(a.to_bits(), b.to_bits(), "{name} not bitwise equal");
            }
        }
        // Saving the loaded model reproduces identical files.
        let dir2 = tempfile::tempdir().unwrap();
        save_checkpoint(&loaded, dir2.path()).unwrap();
        assert_eq!(
            std::fs::read(dir.path().join("weights.bin")).unwrap(),
            std::fs::read(dir2.path().join("weights.bin")).unwrap()
        );
    }

    #[test]
    fn checkpoint_guards_fingerprint_and_dtype() {
        let m: Model<f32> = Model::init_dual_encoder(cfg(), "fp".into()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&m, dir.path()).unwrap();
        assert!(matches!(
            load_checkpoint::<f32>(dir.path(), Some("other")),
            Err(ModelError::FingerprintMismatch { .. })
        ));
        assert!(matches!(
            load_checkpoint::<f64>(dir.path(), None),
            Err(ModelError::BadCheckpoint(_))
        ));
    }
}
