//! Regularity-aware branch: span pooling, biaffine span representation,
//! gated fusion and type classification.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{contract, Result};
use crate::graph::{Graph, Var};
use crate::model::{init_uniform, ModelConfig};
use crate::params::{ParamId, ParamStore};
use crate::spans::SpanGrid;
use crate::tensor::{softmax, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pooling {
    #[default]
    Attention,
    Mean,
    Max,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    #[default]
    Gate,
    Add,
    ConcatLinear,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Affine {
    pub weight: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AwareParams {
    /// `2d x 1`
    pub w_reg: ParamId,
    pub b_reg: ParamId,
    /// `2d x 2d x 2d`, contracted as `sum_ab h_i[a] U[a,k,b] h_j[b]`.
    pub u1: ParamId,
    /// `4d x 2d`
    pub u2: ParamId,
    pub b1: ParamId,
    /// `4d x 1`
    pub u3: ParamId,
    pub b2: ParamId,
    /// `2d x c`
    pub w_type: ParamId,
    pub b3: ParamId,
    pub head_mlp: Option<Affine>,
    pub tail_mlp: Option<Affine>,
    pub fuse_linear: Option<Affine>,
}

impl AwareParams {
    pub(crate) fn create(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        classes: usize,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let h = 2 * cfg.hidden;
        let lin = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let affine = |store: &mut ParamStore, name: &str, rng: &mut ChaCha8Rng, i: usize, o: usize| -> Result<Affine> {
            Ok(Affine {
                weight: store.add(format!("{name}.w"), init_uniform(rng, &[i, o], lin(i)))?,
                bias: store.add(format!("{name}.b"), Tensor::zeros(&[1, o]))?,
            })
        };
        let w_reg = store.add("aware.w_reg", init_uniform(rng, &[h, 1], lin(h)))?;
        let b_reg = store.add("aware.b_reg", Tensor::zeros(&[1, 1]))?;
        let u1 = store.add("aware.u1", init_uniform(rng, &[h, h, h], 1.0 / h as f64))?;
        let u2 = store.add("aware.u2", init_uniform(rng, &[2 * h, h], lin(2 * h)))?;
        let b1 = store.add("aware.b1", Tensor::zeros(&[1, h]))?;
        let u3 = store.add("aware.u3", init_uniform(rng, &[2 * h, 1], lin(2 * h)))?;
        let b2 = store.add("aware.b2", Tensor::zeros(&[1, 1]))?;
        let w_type = store.add("aware.w_type", init_uniform(rng, &[h, classes], lin(h)))?;
        let b3 = store.add("aware.b3", Tensor::zeros(&[1, classes]))?;
        let (head_mlp, tail_mlp) = if cfg.span_mlp {
            (
                Some(affine(store, "aware.head_mlp", rng, h, h)?),
                Some(affine(store, "aware.tail_mlp", rng, h, h)?),
            )
        } else {
            (None, None)
        };
        let fuse_linear = if cfg.fusion == Fusion::ConcatLinear {
            Some(affine(store, "aware.fuse", rng, 2 * h, h)?)
        } else {
            None
        };
        Ok(Self {
            w_reg,
            b_reg,
            u1,
            u2,
            b1,
            u3,
            b2,
            w_type,
            b3,
            head_mlp,
            tail_mlp,
            fuse_linear,
        })
    }

    pub(crate) fn lookup(store: &ParamStore, cfg: &ModelConfig) -> Result<Self> {
        let affine = |name: &str| -> Result<Affine> {
            Ok(Affine {
                weight: store.id(&format!("{name}.w"))?,
                bias: store.id(&format!("{name}.b"))?,
            })
        };
        Ok(Self {
            w_reg: store.id("aware.w_reg")?,
            b_reg: store.id("aware.b_reg")?,
            u1: store.id("aware.u1")?,
            u2: store.id("aware.u2")?,
            b1: store.id("aware.b1")?,
            u3: store.id("aware.u3")?,
            b2: store.id("aware.b2")?,
            w_type: store.id("aware.w_type")?,
            b3: store.id("aware.b3")?,
            head_mlp: cfg.span_mlp.then(|| affine("aware.head_mlp")).transpose()?,
            tail_mlp: cfg.span_mlp.then(|| affine("aware.tail_mlp")).transpose()?,
            fuse_linear: (cfg.fusion == Fusion::ConcatLinear)
                .then(|| affine("aware.fuse"))
                .transpose()?,
        })
    }
}

pub(crate) fn apply_affine(g: &mut Graph<'_>, x: Var, a: &Affine) -> Result<Var> {
    let w = g.param(a.weight);
    let b = g.param(a.bias);
    let y = g.matmul(x, w)?;
    g.add_row(y, b)
}

fn check_span(h: &Tensor, i: usize, j: usize) -> Result<()> {
    if i > j {
        return contract(format!("span start {i} exceeds end {j}"));
    }
    if j >= h.rows() {
        return contract(format!("span ({i}, {j}) exceeds length {}", h.rows()));
    }
    Ok(())
}

/// Linear-attention scores `a_t = W_reg^T h_t + b_reg`, one row per position.
pub fn regularity_scores(g: &mut Graph<'_>, h: Var, p: &AwareParams) -> Result<Var> {
    let w = g.param(p.w_reg);
    let b = g.param(p.b_reg);
    let a = g.matmul(h, w)?;
    g.add_row(a, b)
}

/// Pooled regularity vectors for a batch of spans, `S x 2d`.
pub fn pool_spans(
    g: &mut Graph<'_>,
    h: Var,
    p: &AwareParams,
    pooling: Pooling,
    spans: &[(usize, usize)],
) -> Result<Var> {
    match pooling {
        Pooling::Attention => {
            let scores = regularity_scores(g, h, p)?;
            g.span_attend(h, scores, spans)
        }
        Pooling::Mean => g.span_mean(h, spans),
        Pooling::Max => g.span_max(h, spans),
    }
}

/// Attention-pooled regularity vector of span `(i, j)` (`1 x 2d`). A
/// single-character span yields its own hidden state.
pub fn span_regularity(g: &mut Graph<'_>, h: Var, i: usize, j: usize, p: &AwareParams) -> Result<Var> {
    check_span(g.value(h), i, j)?;
    pool_spans(g, h, p, Pooling::Attention, &[(i, j)])
}

/// Biaffine span representations for a batch of spans, `S x 2d`:
/// `h_i^T U1 h_j + [h_i; h_j] U2 + b1`.
pub fn biaffine_spans(g: &mut Graph<'_>, h: Var, p: &AwareParams, spans: &[(usize, usize)]) -> Result<Var> {
    let (head, tail) = match (&p.head_mlp, &p.tail_mlp) {
        (Some(hm), Some(tm)) => {
            let a = apply_affine(g, h, hm)?;
            let b = apply_affine(g, h, tm)?;
            (g.tanh(a)?, g.tanh(b)?)
        }
        _ => (h, h),
    };
    let width = g.value(head).cols();
    let u1 = g.param(p.u1);
    let bilinear = g.bilinear(head, u1, tail, spans)?;

    // [h_i; h_j] U2 == h_i U2[:2d] + h_j U2[2d:], projected once per position
    let u2 = g.param(p.u2);
    let u2_head = g.slice_rows(u2, 0, width)?;
    let u2_tail = g.slice_rows(u2, width, width)?;
    let proj_head = g.matmul(head, u2_head)?;
    let proj_tail = g.matmul(tail, u2_tail)?;
    let starts: Vec<usize> = spans.iter().map(|s| s.0).collect();
    let ends: Vec<usize> = spans.iter().map(|s| s.1).collect();
    let lin_head = g.gather_rows(proj_head, &starts)?;
    let lin_tail = g.gather_rows(proj_tail, &ends)?;
    let linear = g.add(lin_head, lin_tail)?;
    let sum = g.add(bilinear, linear)?;
    let b1 = g.param(p.b1);
    g.add_row(sum, b1)
}

pub fn span_biaffine(g: &mut Graph<'_>, h: Var, i: usize, j: usize, p: &AwareParams) -> Result<Var> {
    check_span(g.value(h), i, j)?;
    biaffine_spans(g, h, p, &[(i, j)])
}

/// Fused span vectors and, for gate fusion, the `S x 1` gate values.
pub fn fuse(
    g: &mut Graph<'_>,
    h_span: Var,
    h_reg: Var,
    p: &AwareParams,
    fusion: Fusion,
) -> Result<(Var, Option<Var>)> {
    match fusion {
        Fusion::Gate => {
            let joint = g.concat_cols(&[h_span, h_reg])?;
            let u3 = g.param(p.u3);
            let b2 = g.param(p.b2);
            let logit = g.matmul(joint, u3)?;
            let logit = g.add_row(logit, b2)?;
            let gate = g.sigmoid(logit)?;
            // g * span + (1 - g) * reg
            let diff = g.sub(h_span, h_reg)?;
            let scaled = g.mul_col(diff, gate)?;
            Ok((g.add(h_reg, scaled)?, Some(gate)))
        }
        Fusion::Add => Ok((g.add(h_span, h_reg)?, None)),
        Fusion::ConcatLinear => {
            let joint = g.concat_cols(&[h_span, h_reg])?;
            let a = p
                .fuse_linear
                .as_ref()
                .ok_or_else(|| crate::error::Error::Contract("concat fusion needs fuse weights".into()))?;
            Ok((apply_affine(g, joint, a)?, None))
        }
    }
}

/// Gate fusion of a single pair of `1 x 2d` vectors.
pub fn gate_fuse(g: &mut Graph<'_>, h_span: Var, h_reg: Var, p: &AwareParams) -> Result<Var> {
    Ok(fuse(g, h_span, h_reg, p, Fusion::Gate)?.0)
}

/// Graph handles produced by [`classify_spans`].
#[derive(Debug, Clone)]
pub struct AwareOutput {
    pub spans: Vec<(usize, usize)>,
    /// `S x c` unnormalized type scores.
    pub logits: Var,
    pub gate: Option<Var>,
    pub pooled: Option<Var>,
}

/// Type logits for every span of the sentence encoded in `h` (`l x 2d`).
pub fn classify_spans(
    g: &mut Graph<'_>,
    h: Var,
    p: &AwareParams,
    cfg: &ModelConfig,
    spans: Vec<(usize, usize)>,
) -> Result<AwareOutput> {
    let h_span = biaffine_spans(g, h, p, &spans)?;
    let (fused, gate, pooled) = if cfg.regularity {
        let h_reg = pool_spans(g, h, p, cfg.pooling, &spans)?;
        let (fused, gate) = fuse(g, h_span, h_reg, p, cfg.fusion)?;
        (fused, gate, Some(h_reg))
    } else {
        (h_span, None, None)
    };
    let w = g.param(p.w_type);
    let b = g.param(p.b3);
    let logits = g.matmul(fused, w)?;
    let logits = g.add_row(logits, b)?;
    Ok(AwareOutput {
        spans,
        logits,
        gate,
        pooled,
    })
}

/// Per-span type distributions with the gate values and attention weights
/// kept for inspection.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanTypeGrid {
    pub probs: SpanGrid<Vec<f64>>,
    pub gates: Option<SpanGrid<f64>>,
    pub alphas: Option<SpanGrid<Vec<f64>>>,
}

impl SpanTypeGrid {
    pub fn from_output(g: &Graph<'_>, out: &AwareOutput, len: usize, max_len: Option<usize>) -> Result<Self> {
        let logits = g.value(out.logits);
        let probs = (0..logits.rows()).map(|r| softmax(logits.row(r))).collect();
        let probs = SpanGrid::new(len, max_len, probs)?;
        let gates = match out.gate {
            Some(v) => Some(SpanGrid::new(len, max_len, g.value(v).data().to_vec())?),
            None => None,
        };
        let alphas = match out.pooled.and_then(|v| g.span_alphas(v)) {
            Some(a) => Some(SpanGrid::new(len, max_len, a.to_vec())?),
            None => None,
        };
        Ok(Self { probs, gates, alphas })
    }
}

/// Span-level targets: gold class per span (0 = NONE).
pub fn type_targets(grid_spans: &[(usize, usize)], gold: &[(usize, usize, usize)]) -> Vec<usize> {
    grid_spans
        .iter()
        .map(|&(i, j)| {
            gold.iter()
                .find(|g| g.0 == i && g.1 == j)
                .map_or(0, |g| g.2)
        })
        .collect()
}

/// Sum over the selected spans of `-log softmax(logits)[target]`.
/// `keep` selects the spans that enter the loss (all when `None`).
pub fn aware_loss_sum(
    g: &mut Graph<'_>,
    logits: Var,
    targets: &[usize],
    keep: Option<&[usize]>,
) -> Result<Var> {
    let logp = g.log_softmax_rows(logits)?;
    let picked = g.pick(logp, targets)?;
    let picked = match keep {
        Some(rows) => g.gather_rows(picked, rows)?,
        None => picked,
    };
    let s = g.sum(picked)?;
    g.affine(s, -1.0, 0.0)
}

/// Mean over the grid's spans of `-ln p(target)`.
pub fn aware_loss(grid: &SpanTypeGrid, targets: &[usize]) -> Result<f64> {
    let probs = grid.probs.values();
    if probs.len() != targets.len() {
        return contract("one target per span required");
    }
    let total: f64 = probs
        .iter()
        .zip(targets)
        .map(|(p, &t)| -p[t].ln())
        .sum();
    Ok(total / probs.len() as f64)
}
