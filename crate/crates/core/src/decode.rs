//! Decoding span grids into entities, exact-match evaluation and the
//! attention-weight probe.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::aware::{self, Pooling, SpanTypeGrid};
use crate::corpus::{GoldEntity, Sentence, Vocab};
use crate::encoder::Branch;
use crate::error::{contract, Result};
use crate::exec::{map_indexed, Execution};
use crate::graph::Graph;
use crate::model::{Dropout, Model};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EntityPrediction {
    pub start: usize,
    pub end: usize,
    pub type_id: usize,
    pub score: f64,
}

impl EntityPrediction {
    pub fn new(start: usize, end: usize, type_id: usize, score: f64) -> Self {
        Self {
            start,
            end,
            type_id,
            score,
        }
    }

    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn to_entity(&self, vocab: &Vocab) -> GoldEntity {
        GoldEntity::new(self.start, self.end, vocab.type_name(self.type_id))
    }

    /// `E1_i < E2_i <= E1_j < E2_j` in either order.
    pub fn crosses(&self, other: &Self) -> bool {
        let one_way = |a: &Self, b: &Self| a.start < b.start && b.start <= a.end && a.end < b.end;
        one_way(self, other) || one_way(other, self)
    }

    pub fn overlaps(&self, other: &Self) -> bool {
        self.start <= other.end && other.start <= self.end
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OverlapMode {
    /// Only crossing pairs conflict; containment is kept.
    #[default]
    Nested,
    /// Any two overlapping spans conflict.
    Flat,
}

/// Argmax type per span; NONE spans are dropped. Ties go to the lowest
/// class index.
pub fn extract_candidates(grid: &SpanTypeGrid) -> Vec<EntityPrediction> {
    let mut out = Vec::new();
    for ((i, j), probs) in grid.probs.iter() {
        let mut best = 0;
        for (k, p) in probs.iter().enumerate() {
            if *p > probs[best] {
                best = k;
            }
        }
        if best != 0 {
            out.push(EntityPrediction::new(i, j, best, probs[best]));
        }
    }
    out
}

/// Higher score first, then earlier start, shorter span, lower type id.
pub fn rank(a: &EntityPrediction, b: &EntityPrediction) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.start.cmp(&b.start))
        .then(a.len().cmp(&b.len()))
        .then(a.type_id.cmp(&b.type_id))
}

/// Removes the lower-ranked member of every conflicting pair, processing
/// conflicts from the highest-ranked candidate down. Output is in rank order.
pub fn resolve_overlaps(candidates: &[EntityPrediction], mode: OverlapMode) -> Vec<EntityPrediction> {
    let mut sorted = candidates.to_vec();
    sorted.sort_by(rank);
    let mut kept: Vec<EntityPrediction> = Vec::with_capacity(sorted.len());
    for c in sorted {
        let clash = kept.iter().any(|k| match mode {
            OverlapMode::Nested => k.crosses(&c),
            OverlapMode::Flat => k.overlaps(&c),
        });
        if !clash {
            kept.push(c);
        }
    }
    kept
}

pub fn decode_grid(grid: &SpanTypeGrid, mode: OverlapMode) -> Vec<EntityPrediction> {
    let mut out = resolve_overlaps(&extract_candidates(grid), mode);
    out.sort_by_key(|p| (p.start, p.end, p.type_id));
    out
}

pub fn predict_sentence(model: &Model, sentence: &Sentence, mode: OverlapMode) -> Result<Vec<EntityPrediction>> {
    Ok(decode_grid(&model.classify(sentence)?, mode))
}

pub fn predict_corpus(
    model: &Model,
    sentences: &[Sentence],
    mode: OverlapMode,
    exec: Execution,
) -> Result<Vec<Vec<EntityPrediction>>> {
    map_indexed(sentences, exec, |_, s| predict_sentence(model, s, mode))
        .into_iter()
        .collect()
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Scores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub gold: usize,
    pub predicted: usize,
    pub correct: usize,
}

impl Scores {
    pub fn from_counts(gold: usize, predicted: usize, correct: usize) -> Self {
        let ratio = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let precision = ratio(correct, predicted);
        let recall = ratio(correct, gold);
        let f1 = if precision + recall == 0.0 {
            0.0
        } else {
            2.0 * precision * recall / (precision + recall)
        };
        Self {
            precision,
            recall,
            f1,
            gold,
            predicted,
            correct,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    #[serde(flatten)]
    pub overall: Scores,
    pub per_type: BTreeMap<String, Scores>,
}

/// Micro-averaged exact-match scores. A prediction is correct only when
/// start, end and type all match a gold entity.
pub fn evaluate(predictions: &[Vec<GoldEntity>], gold: &[Sentence]) -> Result<EvalReport> {
    if predictions.len() != gold.len() {
        return contract(format!(
            "{} prediction groups for {} gold sentences",
            predictions.len(),
            gold.len()
        ));
    }
    let mut counts: BTreeMap<String, [usize; 3]> = BTreeMap::new();
    for (pred, sent) in predictions.iter().zip(gold) {
        let p: BTreeSet<&GoldEntity> = pred.iter().collect();
        let g: BTreeSet<&GoldEntity> = sent.entities.iter().collect();
        for e in &g {
            counts.entry(e.kind.clone()).or_default()[0] += 1;
        }
        for e in &p {
            let c = counts.entry(e.kind.clone()).or_default();
            c[1] += 1;
            if g.contains(e) {
                c[2] += 1;
            }
        }
    }
    let total = counts.values().fold([0; 3], |a, c| [a[0] + c[0], a[1] + c[1], a[2] + c[2]]);
    Ok(EvalReport {
        overall: Scores::from_counts(total[0], total[1], total[2]),
        per_type: counts
            .into_iter()
            .map(|(k, c)| (k, Scores::from_counts(c[0], c[1], c[2])))
            .collect(),
    })
}

pub fn evaluate_model(model: &Model, sentences: &[Sentence], mode: OverlapMode, exec: Execution) -> Result<EvalReport> {
    let preds = predict_corpus(model, sentences, mode, exec)?;
    let named: Vec<Vec<GoldEntity>> = preds
        .iter()
        .map(|ps| ps.iter().map(|p| p.to_entity(&model.vocab)).collect())
        .collect();
    evaluate(&named, sentences)
}

/// Attention weights of the regularity pooling for span `(i, j)`, one per
/// character. A single-character span yields `[1.0]`.
pub fn inspect_regularity(model: &Model, sentence: &Sentence, span: (usize, usize)) -> Result<Vec<f64>> {
    let (i, j) = span;
    if i > j || j >= sentence.len() {
        return contract(format!(
            "span ({i}, {j}) outside sentence of length {}",
            sentence.len()
        ));
    }
    if !model.config.regularity {
        return contract("model does not pool regularity features");
    }
    match model.config.pooling {
        Pooling::Attention => {}
        Pooling::Mean => return Ok(vec![1.0 / (j - i + 1) as f64; j - i + 1]),
        Pooling::Max => return contract("max pooling has no attention weights"),
    }
    let mut g = Graph::new(&model.params);
    let mut off = Dropout::off();
    let ids = model.char_ids(sentence)?;
    let x = model.embed(&mut g, &ids, &mut off)?;
    let h = model.encode_branch(&mut g, x, Branch::Aware, &mut off)?;
    let pooled = aware::span_regularity(&mut g, h, i, j, &model.ids.aware)?;
    let alphas = g
        .span_alphas(pooled)
        .and_then(|a| a.first().cloned())
        .unwrap_or_default();
    Ok(alphas)
}

/// One line of prediction output.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub chars: String,
    pub entities: Vec<PredictedEntity>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictedEntity {
    pub start: usize,
    pub end: usize,
    #[serde(rename = "type")]
    pub kind: String,
    pub score: f64,
}

impl PredictionRecord {
    pub fn new(sentence: &Sentence, preds: &[EntityPrediction], vocab: &Vocab) -> Self {
        Self {
            chars: sentence.text(),
            entities: preds
                .iter()
                .map(|p| PredictedEntity {
                    start: p.start,
                    end: p.end,
                    kind: vocab.type_name(p.type_id).to_string(),
                    score: p.score,
                })
                .collect(),
        }
    }
}
