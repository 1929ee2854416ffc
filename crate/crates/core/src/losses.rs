//! Loss components over similarity matrices and decoder logits.
//!
//! Every component exists in two forms: a graph-node version used during
//! training (differentiable through the towers) and a plain-array wrapper
//! that routes through the same graph ops, so the closed-form oracle tests
//! exercise the exact code path the trainer uses.

use crate::graph::{Graph, NodeId, Reduction};
use crate::scalar::Scalar;
use crate::textproc::DecoderTarget;
use ndarray::Array2;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GenNorm {
    Sum,
    PerTokenMean,
}

/// Which similarities enter the contrastive denominator besides the
/// positive: the whole batch plus the shared negative pool, or only the
/// query's own row.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum NegativeScope {
    Pooled,
    PerQuery,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub temperature: f64,
    pub margin: f64,
    pub w_cl_qt: f64,
    pub w_pair: f64,
    pub w_gen: f64,
    pub w_cl_qe: f64,
    pub gen_norm: GenNorm,
    pub negative_scope: NegativeScope,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            temperature: 0.05,
            margin: 0.1,
            w_cl_qt: 1.0,
            w_pair: 1.0,
            w_gen: 1.0,
            w_cl_qe: 1.0,
            gen_norm: GenNorm::PerTokenMean,
            negative_scope: NegativeScope::Pooled,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        if !(self.temperature > 0.0) {
            return Err(LossError::BadConfig(format!(
                "temperature must be > 0, got {}",
                self.temperature
            )));
        }
        if self.margin < 0.0 {
            return Err(LossError::BadConfig("margin must be >= 0".into()));
        }
        for (name, w) in [
            ("w_cl_qt", self.w_cl_qt),
            ("w_pair", self.w_pair),
            ("w_gen", self.w_gen),
            ("w_cl_qe", self.w_cl_qe),
        ] {
            if w < 0.0 || !w.is_finite() {
                return Err(LossError::BadConfig(format!("{name} must be >= 0, got {w}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum LossError {
    #[error("invalid loss config: {0}")]
    BadConfig(String),
    #[error("empty batch")]
    EmptyBatch,
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("loss mask selects no positions in the whole batch")]
    NoMaskedTokens,
    #[error("invalid similarities: {0}")]
    BadSimilarities(String),
}

/// Cosine similarities for one batch: `s_allpos[i][j]` between query i and
/// positive j (diagonal holds each query's own positive), `s_neg[i][m]`
/// between query i and pool negative m. `s_neg` may have zero columns.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchSimilarities<T: Scalar> {
    pub s_pos: Vec<T>,
    pub s_allpos: Array2<T>,
    pub s_neg: Array2<T>,
}

impl<T: Scalar> BatchSimilarities<T> {
    pub fn from_parts(s_allpos: Array2<T>, s_neg: Array2<T>) -> Self {
        let s_pos = s_allpos.diag().to_vec();
        BatchSimilarities {
            s_pos,
            s_allpos,
            s_neg,
        }
    }

    pub fn validate(&self) -> Result<(), LossError> {
        let n = self.s_allpos.nrows();
        if n == 0 {
            return Err(LossError::EmptyBatch);
        }
        if self.s_allpos.ncols() != n {
            return Err(LossError::Shape(format!(
                "s_allpos must be square, got {}x{}",
                n,
                self.s_allpos.ncols()
            )));
        }
        if self.s_pos.len() != n || self.s_neg.nrows() != n {
            return Err(LossError::Shape(
                "s_pos and s_neg must have one row per query".into(),
            ));
        }
        let limit = T::from_f64c(1.0 + 1e-6);
        let in_range = |v: &T| v.abs() <= limit;
        if !self.s_allpos.iter().all(in_range) || !self.s_neg.iter().all(in_range) {
            return Err(LossError::BadSimilarities(
                "cosine entries must lie in [-1, 1]".into(),
            ));
        }
        for (i, &p) in self.s_pos.iter().enumerate() {
            if (p - self.s_allpos[(i, i)]).abs() > T::from_f64c(1e-9) {
                return Err(LossError::BadSimilarities(format!(
                    "s_pos[{i}] disagrees with diag(s_allpos)"
                )));
            }
        }
        Ok(())
    }
}

/// Softmax-style contrastive loss over graph nodes. `s_allpos` is N x N,
/// `s_neg` N x M; `neg_valid[i][m]` gates which pool entries may serve as
/// negatives for query i (pool items positive for that query are excluded
/// upstream). Returns a scalar node.
pub fn contrastive_node<T: Scalar>(
    g: &mut Graph<T>,
    s_allpos: NodeId,
    s_neg: Option<NodeId>,
    neg_valid: Option<&Array2<bool>>,
    cfg: &LossConfig,
) -> Result<NodeId, LossError> {
    cfg.validate()?;
    let n = g.value(s_allpos).nrows();
    if n == 0 {
        return Err(LossError::EmptyBatch);
    }
    if g.value(s_allpos).ncols() != n {
        return Err(LossError::Shape("s_allpos must be square".into()));
    }
    let m = s_neg.map_or(0, |id| g.value(id).ncols());
    if let Some(id) = s_neg {
        if g.value(id).nrows() != n {
            return Err(LossError::Shape("s_neg row count != batch size".into()));
        }
    }
    if let Some(v) = neg_valid {
        if v.dim() != (n, m) {
            return Err(LossError::Shape("neg_valid must be N x M".into()));
        }
    }
    let full = match s_neg {
        Some(neg) => g.concat_cols(&[s_allpos, neg]),
        None => s_allpos,
    };
    let allowed = Array2::from_shape_fn((n, n + m), |(i, j)| {
        if j < n {
            match cfg.negative_scope {
                NegativeScope::Pooled => true,
                NegativeScope::PerQuery => j == i,
            }
        } else {
            neg_valid.map_or(true, |v| v[(i, j - n)])
        }
    });
    let pos: Vec<usize> = (0..n).collect();
    Ok(g.info_nce(full, pos, Some(allowed), T::from_f64c(cfg.temperature)))
}

/// Triplet hinge over graph nodes: each query is pushed above its valid pool
/// negatives by `margin`. Queries with no valid negatives contribute 0.
pub fn pairwise_node<T: Scalar>(
    g: &mut Graph<T>,
    s_allpos: NodeId,
    s_neg: Option<NodeId>,
    neg_valid: Option<&Array2<bool>>,
    cfg: &LossConfig,
) -> Result<NodeId, LossError> {
    cfg.validate()?;
    let n = g.value(s_allpos).nrows();
    if n == 0 {
        return Err(LossError::EmptyBatch);
    }
    let m = s_neg.map_or(0, |id| g.value(id).ncols());
    let full = match s_neg {
        Some(neg) => g.concat_cols(&[s_allpos, neg]),
        None => s_allpos,
    };
    let pos: Vec<usize> = (0..n).collect();
    let negs: Vec<Vec<usize>> = (0..n)
        .map(|i| {
            (0..m)
                .filter(|&j| neg_valid.map_or(true, |v| v[(i, j)]))
                .map(|j| n + j)
                .collect()
        })
        .collect();
    for (i, lst) in negs.iter().enumerate() {
        if lst.is_empty() {
            log::warn!("query {i} has no usable negatives; pairwise term contributes 0");
        }
    }
    Ok(g.triplet_hinge(full, pos, negs, T::from_f64c(cfg.margin)))
}

/// Contrastive query-title loss over plain similarity arrays.
pub fn contrastive_qt<T: Scalar>(
    sims: &BatchSimilarities<T>,
    cfg: &LossConfig,
) -> Result<T, LossError> {
    sims.validate()?;
    let mut g = Graph::new();
    let allpos = g.leaf(sims.s_allpos.clone());
    let neg = if sims.s_neg.ncols() > 0 {
        Some(g.leaf(sims.s_neg.clone()))
    } else {
        None
    };
    let node = contrastive_node(&mut g, allpos, neg, None, cfg)?;
    Ok(g.scalar(node))
}

/// Contrastive query-event loss: identical functional form with event
/// embeddings in place of titles; the caller supplies similarities built
/// against event representations.
pub fn contrastive_qe<T: Scalar>(
    sims: &BatchSimilarities<T>,
    cfg: &LossConfig,
) -> Result<T, LossError> {
    contrastive_qt(sims, cfg)
}

/// Triplet loss over plain arrays: one positive similarity and a per-query
/// list of negative similarities.
pub fn pairwise_qt<T: Scalar>(
    s_pos: &[T],
    s_negs: &[Vec<T>],
    cfg: &LossConfig,
) -> Result<T, LossError> {
    cfg.validate()?;
    if s_pos.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    if s_pos.len() != s_negs.len() {
        return Err(LossError::Shape("one negative list per query".into()));
    }
    let margin = T::from_f64c(cfg.margin);
    let mut total = T::zero();
    for (i, (&sp, negs)) in s_pos.iter().zip(s_negs).enumerate() {
        if negs.is_empty() {
            log::warn!("query {i} has no negatives; pairwise term contributes 0");
            continue;
        }
        let mut acc = T::zero();
        for &sn in negs {
            let h = margin + sn - sp;
            if h > T::zero() {
                acc += h;
            }
        }
        total += acc / T::from_f64c(negs.len() as f64);
    }
    Ok(total / T::from_f64c(s_pos.len() as f64))
}

fn masked_rows_targets(target: &DecoderTarget) -> Result<(Vec<usize>, Vec<usize>), LossError> {
    let ids = &target.input_ids.ids;
    if target.loss_mask.len() != ids.len() {
        return Err(LossError::Shape("loss_mask length != target length".into()));
    }
    let mut rows = Vec::new();
    let mut tgts = Vec::new();
    for p in target.masked_positions() {
        if p == 0 {
            return Err(LossError::Shape(
                "loss mask set on position 0, which has no preceding context".into(),
            ));
        }
        rows.push(p - 1);
        tgts.push(ids[p]);
    }
    Ok((rows, tgts))
}

/// Masked cross-entropy over a batch of teacher-forced logits. Each `logits`
/// node must have `target.len() - 1` rows (row i predicts target position
/// i+1). Sequences whose mask is all-zero are skipped; if every sequence in
/// the batch is all-zero this is an error.
pub fn generation_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    items: &[(NodeId, &DecoderTarget)],
    cfg: &LossConfig,
) -> Result<NodeId, LossError> {
    cfg.validate()?;
    if items.is_empty() {
        return Err(LossError::EmptyBatch);
    }
    let mut parts = Vec::new();
    let mut total_masked = 0usize;
    for (logits, target) in items {
        let expect = target.input_ids.ids.len().saturating_sub(1);
        if g.value(*logits).nrows() != expect {
            return Err(LossError::Shape(format!(
                "logits rows {} != target length - 1 = {expect}",
                g.value(*logits).nrows()
            )));
        }
        let (rows, tgts) = masked_rows_targets(target)?;
        if rows.is_empty() {
            continue;
        }
        total_masked += rows.len();
        parts.push(g.cross_entropy(*logits, rows, tgts, Reduction::Sum));
    }
    if parts.is_empty() {
        return Err(LossError::NoMaskedTokens);
    }
    let ones = vec![T::one(); parts.len()];
    let summed = g.weighted_sum(&parts, &ones);
    Ok(match cfg.gen_norm {
        GenNorm::Sum => summed,
        GenNorm::PerTokenMean => g.scale(summed, T::from_f64c(1.0 / total_masked as f64)),
    })
}

/// Single-sequence convenience wrapper over plain logits.
pub fn generation_loss<T: Scalar>(
    logits: &Array2<T>,
    target: &DecoderTarget,
    cfg: &LossConfig,
) -> Result<T, LossError> {
    let mut g = Graph::new();
    let node = g.leaf(logits.clone());
    let loss = generation_loss_node(&mut g, &[(node, target)], cfg)?;
    Ok(g.scalar(loss))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub cl_qt: f64,
    pub pair_qt: f64,
    pub gen: f64,
    pub cl_qe: f64,
    pub total: f64,
}

/// Component nodes present in this step's graph; disabled objectives are None
/// and enter the breakdown as 0.
#[derive(Debug, Clone, Copy, Default)]
pub struct LossNodes {
    pub cl_qt: Option<NodeId>,
    pub pair_qt: Option<NodeId>,
    pub gen: Option<NodeId>,
    pub cl_qe: Option<NodeId>,
}

/// Weighted sum of the present components as a graph node, plus the plain
/// breakdown for logging.
pub fn total_loss_node<T: Scalar>(
    g: &mut Graph<T>,
    nodes: &LossNodes,
    cfg: &LossConfig,
) -> Result<(NodeId, LossBreakdown), LossError> {
    cfg.validate()?;
    let mut parts = Vec::new();
    let mut weights = Vec::new();
    let mut component = |id: Option<NodeId>, w: f64, g: &Graph<T>| -> f64 {
        match id {
            Some(n) => {
                let v = g.scalar(n).to_f64c();
                parts.push(n);
                weights.push(T::from_f64c(w));
                v
            }
            None => 0.0,
        }
    };
    let cl_qt = component(nodes.cl_qt, cfg.w_cl_qt, g);
    let pair_qt = component(nodes.pair_qt, cfg.w_pair, g);
    let gen = component(nodes.gen, cfg.w_gen, g);
    let cl_qe = component(nodes.cl_qe, cfg.w_cl_qe, g);
    let total_node = g.weighted_sum(&parts, &weights);
    let breakdown = LossBreakdown {
        cl_qt,
        pair_qt,
        gen,
        cl_qe,
        total: g.scalar(total_node).to_f64c(),
    };
    Ok((total_node, breakdown))
}

/// Plain weighted combination of already-computed component values.
pub fn total_loss(
    cl_qt: f64,
    pair_qt: f64,
    gen: f64,
    cl_qe: f64,
    cfg: &LossConfig,
) -> Result<LossBreakdown, LossError> {
    cfg.validate()?;
    Ok(LossBreakdown {
        cl_qt,
        pair_qt,
        gen,
        cl_qe,
        total: cfg.w_cl_qt * cl_qt + cfg.w_pair * pair_qt + cfg.w_gen * gen + cfg.w_cl_qe * cl_qe,
    })
}
