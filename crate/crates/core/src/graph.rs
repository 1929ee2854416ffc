//! Reverse-mode autodiff over 2-D tensors.
//!
//! A [`Graph`] is a tape of nodes created in topological order; `backward`
//! sweeps the tape in reverse and accumulates gradients into every node.
//! Values are `ndarray::Array2` so batch×hidden, seq×hidden, seq×vocab and
//! similarity matrices all share one representation; scalars are `1×1`.
//!
//! The op set is deliberately small and each backward rule is unit-tested
//! against central finite differences (see the tests module).

use crate::scalar::Scalar;
use ndarray::{s, Array2, Axis};

pub type NodeId = usize;

/// Normalization mode for fused losses that reduce over rows.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Reduction {
    Sum,
    Mean,
}

enum Op<T: Scalar> {
    Leaf,
    /// C = A · B
    MatMul(NodeId, NodeId),
    /// C = A · Bᵀ
    MatMulTransB(NodeId, NodeId),
    Add(NodeId, NodeId),
    /// x (L×H) + row (1×H) broadcast over rows
    AddRow(NodeId, NodeId),
    Scale(NodeId, T),
    /// Elementwise product with a constant mask (dropout, zeroing).
    MulMask(NodeId, Array2<T>),
    Gelu(NodeId),
    /// Row softmax restricted to `allowed` entries; disallowed outputs are 0.
    MaskedSoftmaxRows {
        x: NodeId,
        allowed: Array2<bool>,
    },
    LayerNorm {
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: T,
    },
    /// Row gather: value[l] = table[ids[l]].
    EmbedLookup {
        table: NodeId,
        ids: Vec<usize>,
    },
    SelectRow {
        x: NodeId,
        row: usize,
    },
    /// Mean over the rows flagged in `keep`.
    MeanRowsMasked {
        x: NodeId,
        keep: Vec<bool>,
    },
    /// Stack 1×H rows into N×H.
    StackRows(Vec<NodeId>),
    SliceCols {
        x: NodeId,
        start: usize,
        len: usize,
    },
    ConcatCols(Vec<NodeId>),
    /// cos(a_i, b_j) for every row pair: (N×H, M×H) → N×M.
    CosineMatrix(NodeId, NodeId),
    /// Mean over rows of `lse(row/τ) − row[pos]/τ`, restricted to allowed columns.
    InfoNce {
        sims: NodeId,
        pos: Vec<usize>,
        allowed: Option<Array2<bool>>,
        tau: T,
    },
    /// Mean over rows of the per-row mean hinge `max(0, ε + s_neg − s_pos)`.
    TripletHinge {
        sims: NodeId,
        pos: Vec<usize>,
        negs: Vec<Vec<usize>>,
        margin: T,
    },
    /// Token-level cross entropy summed (or averaged) over the listed rows.
    CrossEntropy {
        logits: NodeId,
        rows: Vec<usize>,
        targets: Vec<usize>,
        reduction: Reduction,
    },
    /// Σ wᵢ·partᵢ over 1×1 nodes.
    WeightedSum {
        parts: Vec<NodeId>,
        weights: Vec<T>,
    },
}

struct Node<T: Scalar> {
    value: Array2<T>,
    grad: Option<Array2<T>>,
    op: Op<T>,
}

pub struct Graph<T: Scalar> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn row_softmax<T: Scalar>(row: &[T], allowed: impl Fn(usize) -> bool) -> Vec<T> {
    let mut mx = T::neg_infinity();
    for (j, &v) in row.iter().enumerate() {
        if allowed(j) && v > mx {
            mx = v;
        }
    }
    let mut out = vec![T::zero(); row.len()];
    let mut z = T::zero();
    for (j, &v) in row.iter().enumerate() {
        if allowed(j) {
            let e = (v - mx).exp();
            out[j] = e;
            z += e;
        }
    }
    for v in out.iter_mut() {
        *v = *v / z;
    }
    out
}

fn log_sum_exp<T: Scalar>(terms: impl Iterator<Item = T> + Clone) -> T {
    let mut mx = T::neg_infinity();
    for v in terms.clone() {
        if v > mx {
            mx = v;
        }
    }
    let mut z = T::zero();
    for v in terms {
        z += (v - mx).exp();
    }
    mx + z.ln()
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/π)
const GELU_A: f64 = 0.044_715;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Array2<T> {
        &self.nodes[id].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, id: NodeId) -> T {
        debug_assert_eq!(self.nodes[id].value.dim(), (1, 1));
        self.nodes[id].value[(0, 0)]
    }

    pub fn grad(&self, id: NodeId) -> Option<&Array2<T>> {
        self.nodes[id].grad.as_ref()
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, value: Array2<T>) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.dot(&self.nodes[b].value);
        self.push(v, Op::MatMul(a, b))
    }

    pub fn matmul_transb(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = self.nodes[a].value.dot(&self.nodes[b].value.t());
        self.push(v, Op::MatMulTransB(a, b))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let v = &self.nodes[a].value + &self.nodes[b].value;
        self.push(v, Op::Add(a, b))
    }

    pub fn add_row(&mut self, x: NodeId, row: NodeId) -> NodeId {
        debug_assert_eq!(self.nodes[row].value.nrows(), 1);
        let v = &self.nodes[x].value + &self.nodes[row].value;
        self.push(v, Op::AddRow(x, row))
    }

    pub fn scale(&mut self, x: NodeId, c: T) -> NodeId {
        let v = self.nodes[x].value.mapv(|e| e * c);
        self.push(v, Op::Scale(x, c))
    }

    pub fn mul_mask(&mut self, x: NodeId, mask: Array2<T>) -> NodeId {
        let v = &self.nodes[x].value * &mask;
        self.push(v, Op::MulMask(x, mask))
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let c = T::from_f64c(GELU_C);
        let a = T::from_f64c(GELU_A);
        let half = T::from_f64c(0.5);
        let v = self.nodes[x].value.mapv(|e| {
            let u = c * (e + a * e * e * e);
            half * e * (T::one() + u.tanh())
        });
        self.push(v, Op::Gelu(x))
    }

    pub fn masked_softmax_rows(&mut self, x: NodeId, allowed: Array2<bool>) -> NodeId {
        let xv = &self.nodes[x].value;
        debug_assert_eq!(xv.dim(), allowed.dim());
        let mut v = Array2::zeros(xv.dim());
        for (i, row) in xv.outer_iter().enumerate() {
            let sm = row_softmax(row.as_slice().unwrap(), |j| allowed[(i, j)]);
            for (j, p) in sm.into_iter().enumerate() {
                v[(i, j)] = p;
            }
        }
        self.push(v, Op::MaskedSoftmaxRows { x, allowed })
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: T) -> NodeId {
        let xv = &self.nodes[x].value;
        let g = &self.nodes[gamma].value;
        let b = &self.nodes[beta].value;
        let h = xv.ncols();
        let hf = T::from_f64c(h as f64);
        let mut v = Array2::zeros(xv.dim());
        for (i, row) in xv.outer_iter().enumerate() {
            let mu = row.iter().copied().sum::<T>() / hf;
            let var = row.iter().map(|&e| (e - mu) * (e - mu)).sum::<T>() / hf;
            let inv = (var + eps).sqrt().recip();
            for j in 0..h {
                let xh = (row[j] - mu) * inv;
                v[(i, j)] = g[(0, j)] * xh + b[(0, j)];
            }
        }
        self.push(v, Op::LayerNorm { x, gamma, beta, eps })
    }

    pub fn embed_lookup(&mut self, table: NodeId, ids: &[usize]) -> NodeId {
        let t = &self.nodes[table].value;
        let mut v = Array2::zeros((ids.len(), t.ncols()));
        for (l, &id) in ids.iter().enumerate() {
            v.row_mut(l).assign(&t.row(id));
        }
        self.push(
            v,
            Op::EmbedLookup {
                table,
                ids: ids.to_vec(),
            },
        )
    }

    pub fn select_row(&mut self, x: NodeId, row: usize) -> NodeId {
        let v = self.nodes[x]
            .value
            .row(row)
            .to_owned()
            .insert_axis(Axis(0));
        self.push(v, Op::SelectRow { x, row })
    }

    pub fn mean_rows_masked(&mut self, x: NodeId, keep: Vec<bool>) -> NodeId {
        let xv = &self.nodes[x].value;
        let k = keep.iter().filter(|&&b| b).count();
        assert!(k > 0, "mean over zero rows");
        let kf = T::from_f64c(k as f64);
        let mut acc = Array2::zeros((1, xv.ncols()));
        for (i, row) in xv.outer_iter().enumerate() {
            if keep[i] {
                acc.row_mut(0).zip_mut_with(&row, |a, &b| *a += b);
            }
        }
        acc.mapv_inplace(|e| e / kf);
        self.push(acc, Op::MeanRowsMasked { x, keep })
    }

    pub fn stack_rows(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let h = self.nodes[parts[0]].value.ncols();
        let mut v = Array2::zeros((parts.len(), h));
        for (i, &p) in parts.iter().enumerate() {
            debug_assert_eq!(self.nodes[p].value.dim(), (1, h));
            v.row_mut(i).assign(&self.nodes[p].value.row(0));
        }
        self.push(v, Op::StackRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> NodeId {
        let v = self.nodes[x]
            .value
            .slice(s![.., start..start + len])
            .to_owned();
        self.push(v, Op::SliceCols { x, start, len })
    }

    pub fn concat_cols(&mut self, parts: &[NodeId]) -> NodeId {
        assert!(!parts.is_empty());
        let rows = self.nodes[parts[0]].value.nrows();
        let total: usize = parts.iter().map(|&p| self.nodes[p].value.ncols()).sum();
        let mut v = Array2::zeros((rows, total));
        let mut at = 0;
        for &p in parts {
            let pv = &self.nodes[p].value;
            debug_assert_eq!(pv.nrows(), rows);
            v.slice_mut(s![.., at..at + pv.ncols()]).assign(pv);
            at += pv.ncols();
        }
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    pub fn cosine_matrix(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let av = &self.nodes[a].value;
        let bv = &self.nodes[b].value;
        debug_assert_eq!(av.ncols(), bv.ncols());
        let tiny = T::from_f64c(1e-30);
        let na: Vec<T> = av
            .outer_iter()
            .map(|r| r.iter().map(|&e| e * e).sum::<T>().sqrt().max(tiny))
            .collect();
        let nb: Vec<T> = bv
            .outer_iter()
            .map(|r| r.iter().map(|&e| e * e).sum::<T>().sqrt().max(tiny))
            .collect();
        let mut v = av.dot(&bv.t());
        for (i, mut row) in v.outer_iter_mut().enumerate() {
            for (j, e) in row.iter_mut().enumerate() {
                *e = *e / (na[i] * nb[j]);
            }
        }
        self.push(v, Op::CosineMatrix(a, b))
    }

    pub fn info_nce(
        &mut self,
        sims: NodeId,
        pos: Vec<usize>,
        allowed: Option<Array2<bool>>,
        tau: T,
    ) -> NodeId {
        let sv = &self.nodes[sims].value;
        let n = sv.nrows();
        assert_eq!(pos.len(), n);
        if let Some(a) = &allowed {
            assert_eq!(a.dim(), sv.dim());
            for (i, &p) in pos.iter().enumerate() {
                assert!(a[(i, p)], "positive column must be allowed");
            }
        }
        let nf = T::from_f64c(n as f64);
        let mut total = T::zero();
        for (i, row) in sv.outer_iter().enumerate() {
            let ok = |j: usize| allowed.as_ref().map_or(true, |a| a[(i, j)]);
            let lse = log_sum_exp(
                row.iter()
                    .enumerate()
                    .filter(|(j, _)| ok(*j))
                    .map(|(_, &v)| v / tau)
                    .collect::<Vec<_>>()
                    .into_iter(),
            );
            total += lse - row[pos[i]] / tau;
        }
        let v = Array2::from_elem((1, 1), total / nf);
        self.push(
            v,
            Op::InfoNce {
                sims,
                pos,
                allowed,
                tau,
            },
        )
    }

    pub fn triplet_hinge(
        &mut self,
        sims: NodeId,
        pos: Vec<usize>,
        negs: Vec<Vec<usize>>,
        margin: T,
    ) -> NodeId {
        let sv = &self.nodes[sims].value;
        let n = sv.nrows();
        assert_eq!(pos.len(), n);
        assert_eq!(negs.len(), n);
        let nf = T::from_f64c(n as f64);
        let mut total = T::zero();
        for i in 0..n {
            if negs[i].is_empty() {
                continue;
            }
            let mf = T::from_f64c(negs[i].len() as f64);
            let sp = sv[(i, pos[i])];
            let mut acc = T::zero();
            for &m in &negs[i] {
                let h = margin + sv[(i, m)] - sp;
                if h > T::zero() {
                    acc += h;
                }
            }
            total += acc / mf;
        }
        let v = Array2::from_elem((1, 1), total / nf);
        self.push(
            v,
            Op::TripletHinge {
                sims,
                pos,
                negs,
                margin,
            },
        )
    }

    pub fn cross_entropy(
        &mut self,
        logits: NodeId,
        rows: Vec<usize>,
        targets: Vec<usize>,
        reduction: Reduction,
    ) -> NodeId {
        assert_eq!(rows.len(), targets.len());
        assert!(!rows.is_empty(), "cross entropy over zero positions");
        let lv = &self.nodes[logits].value;
        let mut total = T::zero();
        for (&r, &t) in rows.iter().zip(&targets) {
            let row = lv.row(r);
            let lse = log_sum_exp(row.iter().copied().collect::<Vec<_>>().into_iter());
            total += lse - row[t];
        }
        if reduction == Reduction::Mean {
            total = total / T::from_f64c(rows.len() as f64);
        }
        let v = Array2::from_elem((1, 1), total);
        self.push(
            v,
            Op::CrossEntropy {
                logits,
                rows,
                targets,
                reduction,
            },
        )
    }

    pub fn weighted_sum(&mut self, parts: &[NodeId], weights: &[T]) -> NodeId {
        assert_eq!(parts.len(), weights.len());
        let mut total = T::zero();
        for (&p, &w) in parts.iter().zip(weights) {
            debug_assert_eq!(self.nodes[p].value.dim(), (1, 1));
            total += self.nodes[p].value[(0, 0)] * w;
        }
        let v = Array2::from_elem((1, 1), total);
        self.push(
            v,
            Op::WeightedSum {
                parts: parts.to_vec(),
                weights: weights.to_vec(),
            },
        )
    }

    fn add_grad(&mut self, id: NodeId, delta: &Array2<T>) {
        let node = &mut self.nodes[id];
        match &mut node.grad {
            Some(g) => *g += delta,
            None => node.grad = Some(delta.clone()),
        }
    }

    /// Backpropagate from a 1×1 loss node through the whole tape.
    pub fn backward(&mut self, loss: NodeId) {
        assert_eq!(self.nodes[loss].value.dim(), (1, 1), "loss must be scalar");
        self.nodes[loss].grad = Some(Array2::ones((1, 1)));
        for id in (0..=loss).rev() {
            let Some(g) = self.nodes[id].grad.clone() else {
                continue;
            };
            // Ops read parent values immutably, then accumulate parent grads.
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = g.dot(&self.nodes[b].value.t());
                    let db = self.nodes[a].value.t().dot(&g);
                    self.add_grad(a, &da);
                    self.add_grad(b, &db);
                }
                Op::MatMulTransB(a, b) => {
                    let (a, b) = (*a, *b);
                    let da = g.dot(&self.nodes[b].value);
                    let db = g.t().dot(&self.nodes[a].value);
                    self.add_grad(a, &da);
                    self.add_grad(b, &db);
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    self.add_grad(a, &g);
                    self.add_grad(b, &g);
                }
                Op::AddRow(x, row) => {
                    let (x, row) = (*x, *row);
                    let dr = g.sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.add_grad(x, &g);
                    self.add_grad(row, &dr);
                }
                Op::Scale(x, c) => {
                    let (x, c) = (*x, *c);
                    let dx = g.mapv(|e| e * c);
                    self.add_grad(x, &dx);
                }
                Op::MulMask(x, mask) => {
                    let x = *x;
                    let dx = &g * mask;
                    self.add_grad(x, &dx);
                }
                Op::Gelu(x) => {
                    let x = *x;
                    let c = T::from_f64c(GELU_C);
                    let a = T::from_f64c(GELU_A);
                    let half = T::from_f64c(0.5);
                    let three = T::from_f64c(3.0);
                    let xv = self.nodes[x].value.clone();
                    let mut dx = g.clone();
                    dx.zip_mut_with(&xv, |gv, &e| {
                        let u = c * (e + a * e * e * e);
                        let t = u.tanh();
                        let du = c * (T::one() + three * a * e * e);
                        let deriv = half * (T::one() + t) + half * e * (T::one() - t * t) * du;
                        *gv = *gv * deriv;
                    });
                    self.add_grad(x, &dx);
                }
                Op::MaskedSoftmaxRows { x, allowed } => {
                    let x = *x;
                    let allowed = allowed.clone();
                    let y = self.nodes[id].value.clone();
                    let mut dx = Array2::zeros(y.dim());
                    for i in 0..y.nrows() {
                        let mut dot = T::zero();
                        for j in 0..y.ncols() {
                            dot += g[(i, j)] * y[(i, j)];
                        }
                        for j in 0..y.ncols() {
                            if allowed[(i, j)] {
                                dx[(i, j)] = y[(i, j)] * (g[(i, j)] - dot);
                            }
                        }
                    }
                    self.add_grad(x, &dx);
                }
                Op::LayerNorm { x, gamma, beta, eps } => {
                    let (x, gamma, beta, eps) = (*x, *gamma, *beta, *eps);
                    let xv = self.nodes[x].value.clone();
                    let gv = self.nodes[gamma].value.clone();
                    let h = xv.ncols();
                    let hf = T::from_f64c(h as f64);
                    let mut dx = Array2::zeros(xv.dim());
                    let mut dgamma = Array2::zeros((1, h));
                    let mut dbeta = Array2::zeros((1, h));
                    for i in 0..xv.nrows() {
                        let row = xv.row(i);
                        let mu = row.iter().copied().sum::<T>() / hf;
                        let var = row.iter().map(|&e| (e - mu) * (e - mu)).sum::<T>() / hf;
                        let inv = (var + eps).sqrt().recip();
                        let xhat: Vec<T> = row.iter().map(|&e| (e - mu) * inv).collect();
                        let mut mean_dxhat = T::zero();
                        let mut mean_dxhat_xhat = T::zero();
                        for j in 0..h {
                            let dy = g[(i, j)];
                            dgamma[(0, j)] += dy * xhat[j];
                            dbeta[(0, j)] += dy;
                            let dxh = dy * gv[(0, j)];
                            mean_dxhat += dxh;
                            mean_dxhat_xhat += dxh * xhat[j];
                        }
                        mean_dxhat = mean_dxhat / hf;
                        mean_dxhat_xhat = mean_dxhat_xhat / hf;
                        for j in 0..h {
                            let dxh = g[(i, j)] * gv[(0, j)];
                            dx[(i, j)] = inv * (dxh - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                        }
                    }
                    self.add_grad(x, &dx);
                    self.add_grad(gamma, &dgamma);
                    self.add_grad(beta, &dbeta);
                }
                Op::EmbedLookup { table, ids } => {
                    let table = *table;
                    let ids = ids.clone();
                    let mut dt = Array2::zeros(self.nodes[table].value.dim());
                    for (l, &idx) in ids.iter().enumerate() {
                        let mut r = dt.row_mut(idx);
                        r.zip_mut_with(&g.row(l), |a, &b| *a += b);
                    }
                    self.add_grad(table, &dt);
                }
                Op::SelectRow { x, row } => {
                    let (x, row) = (*x, *row);
                    let mut dx = Array2::zeros(self.nodes[x].value.dim());
                    dx.row_mut(row).assign(&g.row(0));
                    self.add_grad(x, &dx);
                }
                Op::MeanRowsMasked { x, keep } => {
                    let x = *x;
                    let keep = keep.clone();
                    let k = keep.iter().filter(|&&b| b).count();
                    let kf = T::from_f64c(k as f64);
                    let mut dx = Array2::zeros(self.nodes[x].value.dim());
                    for (i, &kept) in keep.iter().enumerate() {
                        if kept {
                            let mut r = dx.row_mut(i);
                            r.zip_mut_with(&g.row(0), |a, &b| *a += b / kf);
                        }
                    }
                    self.add_grad(x, &dx);
                }
                Op::StackRows(parts) => {
                    let parts = parts.clone();
                    for (i, p) in parts.into_iter().enumerate() {
                        let dp = g.row(i).to_owned().insert_axis(Axis(0));
                        self.add_grad(p, &dp);
                    }
                }
                Op::SliceCols { x, start, len } => {
                    let (x, start, len) = (*x, *start, *len);
                    let mut dx = Array2::zeros(self.nodes[x].value.dim());
                    dx.slice_mut(s![.., start..start + len]).assign(&g);
                    self.add_grad(x, &dx);
                }
                Op::ConcatCols(parts) => {
                    let parts = parts.clone();
                    let mut at = 0;
                    for p in parts {
                        let w = self.nodes[p].value.ncols();
                        let dp = g.slice(s![.., at..at + w]).to_owned();
                        self.add_grad(p, &dp);
                        at += w;
                    }
                }
                Op::CosineMatrix(a, b) => {
                    let (a, b) = (*a, *b);
                    let av = self.nodes[a].value.clone();
                    let bv = self.nodes[b].value.clone();
                    let y = self.nodes[id].value.clone();
                    let tiny = T::from_f64c(1e-30);
                    let na: Vec<T> = av
                        .outer_iter()
                        .map(|r| r.iter().map(|&e| e * e).sum::<T>().sqrt().max(tiny))
                        .collect();
                    let nb: Vec<T> = bv
                        .outer_iter()
                        .map(|r| r.iter().map(|&e| e * e).sum::<T>().sqrt().max(tiny))
                        .collect();
                    let mut da = Array2::zeros(av.dim());
                    let mut db = Array2::zeros(bv.dim());
                    for i in 0..av.nrows() {
                        for j in 0..bv.nrows() {
                            let gij = g[(i, j)];
                            if gij == T::zero() {
                                continue;
                            }
                            let denom = na[i] * nb[j];
                            for h in 0..av.ncols() {
                                da[(i, h)] += gij
                                    * (bv[(j, h)] / denom - y[(i, j)] * av[(i, h)] / (na[i] * na[i]));
                                db[(j, h)] += gij
                                    * (av[(i, h)] / denom - y[(i, j)] * bv[(j, h)] / (nb[j] * nb[j]));
                            }
                        }
                    }
                    self.add_grad(a, &da);
                    self.add_grad(b, &db);
                }
                Op::InfoNce {
                    sims,
                    pos,
                    allowed,
                    tau,
                } => {
                    let sims = *sims;
                    let pos = pos.clone();
                    let allowed = allowed.clone();
                    let tau = *tau;
                    let sv = self.nodes[sims].value.clone();
                    let n = sv.nrows();
                    let nf = T::from_f64c(n as f64);
                    let g0 = g[(0, 0)];
                    let mut dsims = Array2::zeros(sv.dim());
                    for i in 0..n {
                        let ok = |j: usize| allowed.as_ref().map_or(true, |a| a[(i, j)]);
                        let scaled: Vec<T> = sv.row(i).iter().map(|&v| v / tau).collect();
                        let sm = row_softmax(&scaled, ok);
                        for j in 0..sv.ncols() {
                            if ok(j) {
                                let indicator = if j == pos[i] { T::one() } else { T::zero() };
                                dsims[(i, j)] = g0 * (sm[j] - indicator) / (tau * nf);
                            }
                        }
                    }
                    self.add_grad(sims, &dsims);
                }
                Op::TripletHinge {
                    sims,
                    pos,
                    negs,
                    margin,
                } => {
                    let sims = *sims;
                    let pos = pos.clone();
                    let negs = negs.clone();
                    let margin = *margin;
                    let sv = self.nodes[sims].value.clone();
                    let n = sv.nrows();
                    let nf = T::from_f64c(n as f64);
                    let g0 = g[(0, 0)];
                    let mut dsims = Array2::zeros(sv.dim());
                    for i in 0..n {
                        if negs[i].is_empty() {
                            continue;
                        }
                        let mf = T::from_f64c(negs[i].len() as f64);
                        let sp = sv[(i, pos[i])];
                        for &m in &negs[i] {
                            if margin + sv[(i, m)] - sp > T::zero() {
                                let w = g0 / (nf * mf);
                                dsims[(i, m)] += w;
                                dsims[(i, pos[i])] -= w;
                            }
                        }
                    }
                    self.add_grad(sims, &dsims);
                }
                Op::CrossEntropy {
                    logits,
                    rows,
                    targets,
                    reduction,
                } => {
                    let logits = *logits;
                    let rows = rows.clone();
                    let targets = targets.clone();
                    let reduction = *reduction;
                    let lv = self.nodes[logits].value.clone();
                    let g0 = g[(0, 0)];
                    let norm = match reduction {
                        Reduction::Sum => T::one(),
                        Reduction::Mean => T::from_f64c(rows.len() as f64).recip(),
                    };
                    let mut dl = Array2::zeros(lv.dim());
                    for (&r, &t) in rows.iter().zip(&targets) {
                        let row: Vec<T> = lv.row(r).iter().copied().collect();
                        let sm = row_softmax(&row, |_| true);
                        for j in 0..row.len() {
                            let indicator = if j == t { T::one() } else { T::zero() };
                            dl[(r, j)] += g0 * norm * (sm[j] - indicator);
                        }
                    }
                    self.add_grad(logits, &dl);
                }
                Op::WeightedSum { parts, weights } => {
                    let parts = parts.clone();
                    let weights = weights.clone();
                    let g0 = g[(0, 0)];
                    for (p, w) in parts.into_iter().zip(weights) {
                        let dp = Array2::from_elem((1, 1), g0 * w);
                        self.add_grad(p, &dp);
                    }
                }
            }
        }
    }
}
