//! Regularity-agnostic branch: head/tail projections and the sigmoid
//! biaffine entity-probability score. Used only for training.

use rand_chacha::ChaCha8Rng;

use crate::aware::{apply_affine, Affine};
use crate::error::{contract, Result};
use crate::graph::{Graph, Var};
use crate::model::{init_uniform, Dropout, ModelConfig};
use crate::params::{ParamId, ParamStore};
use crate::spans::SpanGrid;
use crate::tensor::Tensor;

/// Probabilities are clamped to this margin away from 0 and 1 before logs.
pub const PROB_CLAMP: f64 = 1e-7;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AgnosticParams {
    pub head: Affine,
    pub tail: Affine,
    /// `(m+1) x 1 x (m+1)`
    pub u_m: ParamId,
}

impl AgnosticParams {
    pub(crate) fn create(store: &mut ParamStore, cfg: &ModelConfig, rng: &mut ChaCha8Rng) -> Result<Self> {
        let (h, m) = (2 * cfg.hidden, cfg.mlp_dim);
        let bound = 1.0 / (h as f64).sqrt();
        let head = Affine {
            weight: store.add("agnostic.head.w", init_uniform(rng, &[h, m], bound))?,
            bias: store.add("agnostic.head.b", Tensor::zeros(&[1, m]))?,
        };
        let tail = Affine {
            weight: store.add("agnostic.tail.w", init_uniform(rng, &[h, m], bound))?,
            bias: store.add("agnostic.tail.b", Tensor::zeros(&[1, m]))?,
        };
        let u_m = store.add(
            "agnostic.u_m",
            init_uniform(rng, &[m + 1, 1, m + 1], 1.0 / (m + 1) as f64),
        )?;
        Ok(Self { head, tail, u_m })
    }

    pub(crate) fn lookup(store: &ParamStore) -> Result<Self> {
        Ok(Self {
            head: Affine {
                weight: store.id("agnostic.head.w")?,
                bias: store.id("agnostic.head.b")?,
            },
            tail: Affine {
                weight: store.id("agnostic.tail.w")?,
                bias: store.id("agnostic.tail.b")?,
            },
            u_m: store.id("agnostic.u_m")?,
        })
    }
}

/// `tanh(H W + b)` for head and tail roles, each `l x m`.
pub fn project_head_tail(
    g: &mut Graph<'_>,
    h_agnostic: Var,
    p: &AgnosticParams,
    rate: f64,
    dropout: &mut Dropout,
) -> Result<(Var, Var)> {
    let head = apply_affine(g, h_agnostic, &p.head)?;
    let head = g.tanh(head)?;
    let head = dropout.apply(g, head, rate)?;
    let tail = apply_affine(g, h_agnostic, &p.tail)?;
    let tail = g.tanh(tail)?;
    let tail = dropout.apply(g, tail, rate)?;
    Ok((head, tail))
}

/// `sigma([h_i;1]^T U_m [h_j;1])` per span, `S x 1`.
pub fn boundary_scores(
    g: &mut Graph<'_>,
    head: Var,
    tail: Var,
    p: &AgnosticParams,
    spans: &[(usize, usize)],
) -> Result<Var> {
    let rows = g.value(head).rows();
    let ones = g.constant(Tensor::filled(&[rows, 1], 1.0))?;
    let head_aug = g.concat_cols(&[head, ones])?;
    let tail_aug = g.concat_cols(&[tail, ones])?;
    let u = g.param(p.u_m);
    let logits = g.bilinear(head_aug, u, tail_aug, spans)?;
    g.sigmoid(logits)
}

/// Sum over spans of binary cross-entropy with clamped probabilities.
pub fn agnostic_loss_sum(g: &mut Graph<'_>, probs: Var, targets: &[f64]) -> Result<Var> {
    let n = g.value(probs).rows();
    if targets.len() != n {
        return contract("one binary target per span required");
    }
    let p = g.clamp(probs, PROB_CLAMP, 1.0 - PROB_CLAMP)?;
    let log_p = g.log(p)?;
    let q = g.affine(p, -1.0, 1.0)?;
    let log_q = g.log(q)?;
    let y = g.constant(Tensor::matrix(n, 1, targets.to_vec())?)?;
    let not_y = g.constant(Tensor::matrix(n, 1, targets.iter().map(|t| 1.0 - t).collect())?)?;
    let pos = g.mul(y, log_p)?;
    let neg = g.mul(not_y, log_q)?;
    let both = g.add(pos, neg)?;
    let s = g.sum(both)?;
    g.affine(s, -1.0, 0.0)
}

/// Per-span entity probabilities.
pub type BoundaryGrid = SpanGrid<f64>;

/// Mean binary cross-entropy over the grid's spans.
pub fn agnostic_loss(grid: &BoundaryGrid, targets: &[f64]) -> Result<f64> {
    let probs = grid.values();
    if probs.len() != targets.len() {
        return contract("one binary target per span required");
    }
    let total: f64 = probs
        .iter()
        .zip(targets)
        .map(|(p, y)| {
            let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
            -(y * p.ln() + (1.0 - y) * (1.0 - p).ln())
        })
        .sum();
    Ok(total / probs.len() as f64)
}

pub fn boundary_targets(spans: &[(usize, usize)], gold: &[(usize, usize, usize)]) -> Vec<f64> {
    spans
        .iter()
        .map(|&(i, j)| {
            if gold.iter().any(|g| g.0 == i && g.1 == j) {
                1.0
            } else {
                0.0
            }
        })
        .collect()
}
