//! Module ablation sweeps and the attention-concentration measurement.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::aware::Pooling;
use crate::corpus::{GoldEntity, Sentence, Vocab};
use crate::decode::{evaluate, inspect_regularity, predict_corpus, EvalReport, OverlapMode};
use crate::error::Result;
use crate::exec::{map_indexed, Execution};
use crate::model::{Model, ModelConfig};
use crate::synth::{SynthConfig, SynthCorpora};
use crate::train::{train, TrainConfig};

/// One model variant of the sweep.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct AblationRow {
    pub name: &'static str,
    pub regularity: bool,
    pub lambda_agnostic: f64,
    pub lambda_orth: f64,
}

pub const ABLATION_ROWS: [AblationRow; 5] = [
    AblationRow {
        name: "vanilla",
        regularity: false,
        lambda_agnostic: 0.0,
        lambda_orth: 0.0,
    },
    AblationRow {
        name: "+agnostic",
        regularity: false,
        lambda_agnostic: 1.0,
        lambda_orth: 0.0,
    },
    AblationRow {
        name: "+aware",
        regularity: true,
        lambda_agnostic: 0.0,
        lambda_orth: 0.0,
    },
    AblationRow {
        name: "+aware&agnostic",
        regularity: true,
        lambda_agnostic: 1.0,
        lambda_orth: 0.0,
    },
    AblationRow {
        name: "full",
        regularity: true,
        lambda_agnostic: 1.0,
        lambda_orth: 0.5,
    },
];

impl AblationRow {
    pub fn by_name(name: &str) -> Option<Self> {
        ABLATION_ROWS.iter().copied().find(|r| r.name == name)
    }

    /// The base configs with this row's switches applied; the train seed is
    /// set to `seed`.
    pub fn apply(&self, model: &ModelConfig, train: &TrainConfig, seed: u64) -> (ModelConfig, TrainConfig) {
        let model = ModelConfig {
            regularity: self.regularity,
            ..model.clone()
        };
        let train = TrainConfig {
            lambda_agnostic: self.lambda_agnostic,
            lambda_orth: self.lambda_orth,
            seed,
            ..train.clone()
        };
        (model, train)
    }
}

/// Attention mass on the indicator character of correctly predicted
/// indicator-type entities, against the uniform weight `1/len`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AlphaStats {
    pub count: usize,
    pub mean_alpha: f64,
    pub mean_uniform: f64,
}

impl AlphaStats {
    pub fn ratio(&self) -> f64 {
        self.mean_alpha / self.mean_uniform
    }
}

/// Only entities that end in one of their type's indicator characters and
/// span at least two characters count.
pub fn alpha_concentration(
    model: &Model,
    sentences: &[Sentence],
    synth: &SynthConfig,
    overlap: OverlapMode,
    exec: Execution,
) -> Result<Option<AlphaStats>> {
    if !model.config.regularity || model.config.pooling != Pooling::Attention {
        return Ok(None);
    }
    let preds = predict_corpus(model, sentences, overlap, exec)?;
    let per_sentence = map_indexed(sentences, exec, |k, s| -> Result<Vec<(f64, f64)>> {
        let gold: BTreeSet<&GoldEntity> = s.entities.iter().collect();
        let mut out = Vec::new();
        for p in &preds[k] {
            let e = p.to_entity(&model.vocab);
            let indicators = match synth.indicator_chars.get(&e.kind) {
                Some(chars) => chars,
                None => continue,
            };
            if e.len() < 2 || !gold.contains(&e) || !indicators.contains(&s.chars[e.end]) {
                continue;
            }
            let alphas = inspect_regularity(model, s, (e.start, e.end))?;
            out.push((alphas[alphas.len() - 1], 1.0 / e.len() as f64));
        }
        Ok(out)
    });
    let (mut count, mut alpha, mut uniform) = (0usize, 0.0, 0.0);
    for r in per_sentence {
        for (a, u) in r? {
            count += 1;
            alpha += a;
            uniform += u;
        }
    }
    if count == 0 {
        return Ok(None);
    }
    Ok(Some(AlphaStats {
        count,
        mean_alpha: alpha / count as f64,
        mean_uniform: uniform / count as f64,
    }))
}

#[derive(Debug, Clone, Serialize)]
pub struct RunResult {
    pub row: &'static str,
    pub seed: u64,
    pub best_epoch: usize,
    pub test: EvalReport,
    /// Mean eval-mode orthogonality penalty of the last epoch's model over
    /// the test split.
    pub final_orth: f64,
    pub alpha: Option<AlphaStats>,
}

/// Trains one row for one seed and scores the dev-selected model on test.
pub fn run_one(
    corpora: &SynthCorpora,
    vocab: &Vocab,
    synth: &SynthConfig,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    row: AblationRow,
    seed: u64,
) -> Result<RunResult> {
    let (mcfg, tcfg) = row.apply(model_cfg, train_cfg, seed);
    let model = Model::new(mcfg, vocab.clone(), seed)?;
    let outcome = train(model, &corpora.train, &corpora.dev, &tcfg, &mut ())?;
    let preds = predict_corpus(&outcome.best, &corpora.test, tcfg.overlap, tcfg.execution)?;
    let named: Vec<Vec<GoldEntity>> = preds
        .iter()
        .map(|ps| ps.iter().map(|p| p.to_entity(vocab)).collect())
        .collect();
    let test = evaluate(&named, &corpora.test)?;
    let orth: Vec<Result<f64>> = map_indexed(&corpora.test, tcfg.execution, |_, s| outcome.last.orth_value(s));
    let mut final_orth = 0.0;
    for o in orth {
        final_orth += o?;
    }
    final_orth /= corpora.test.len().max(1) as f64;
    let alpha = alpha_concentration(&outcome.best, &corpora.test, synth, tcfg.overlap, tcfg.execution)?;
    log::info!("{} seed {seed}: test f1 {:.4}", row.name, test.overall.f1);
    Ok(RunResult {
        row: row.name,
        seed,
        best_epoch: outcome.best_epoch,
        test,
        final_orth,
        alpha,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MeanSd {
    pub mean: f64,
    pub sd: f64,
}

impl MeanSd {
    /// Sample standard deviation; 0 for a single value.
    pub fn of(xs: &[f64]) -> Self {
        let n = xs.len() as f64;
        if xs.is_empty() {
            return Self { mean: f64::NAN, sd: f64::NAN };
        }
        let mean = xs.iter().sum::<f64>() / n;
        let sd = if xs.len() < 2 {
            0.0
        } else {
            (xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, sd }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RowSummary {
    pub row: &'static str,
    pub precision: MeanSd,
    pub recall: MeanSd,
    pub f1: MeanSd,
    pub orth: MeanSd,
}

#[derive(Debug, Clone, Serialize)]
pub struct AblationReport {
    pub runs: Vec<RunResult>,
    pub summary: Vec<RowSummary>,
}

impl AblationReport {
    pub fn runs_of<'a>(&'a self, row: &'a str) -> impl Iterator<Item = &'a RunResult> {
        self.runs.iter().filter(move |r| r.row == row)
    }

    pub fn row(&self, row: &str) -> Option<&RowSummary> {
        self.summary.iter().find(|r| r.row == row)
    }

    /// Plain-text comparison table, one line per row, values in percent.
    pub fn table(&self) -> String {
        let mut out = format!(
            "{:<16} {:>14} {:>14} {:>14} {:>12}\n",
            "model", "P", "R", "F1", "orth"
        );
        let pct = |m: MeanSd| format!("{:.2}±{:.2}", 100.0 * m.mean, 100.0 * m.sd);
        for r in &self.summary {
            let _ = writeln!(
                out,
                "{:<16} {:>14} {:>14} {:>14} {:>12.3e}",
                r.row,
                pct(r.precision),
                pct(r.recall),
                pct(r.f1),
                r.orth.mean
            );
        }
        out
    }
}

/// Every row of `rows` for every seed. Runs are independent and executed
/// data-parallel; results come back in (row, seed) order.
pub fn run_ablation(
    corpora: &SynthCorpora,
    vocab: &Vocab,
    synth: &SynthConfig,
    model_cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    rows: &[AblationRow],
    seeds: &[u64],
) -> Result<AblationReport> {
    let jobs: Vec<(AblationRow, u64)> = rows
        .iter()
        .flat_map(|r| seeds.iter().map(move |s| (*r, *s)))
        .collect();
    let runs = map_indexed(&jobs, train_cfg.execution, |_, &(row, seed)| {
        run_one(corpora, vocab, synth, model_cfg, train_cfg, row, seed)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let summary = rows
        .iter()
        .map(|row| {
            let of = |f: &dyn Fn(&RunResult) -> f64| {
                MeanSd::of(&runs.iter().filter(|r| r.row == row.name).map(f).collect::<Vec<_>>())
            };
            RowSummary {
                row: row.name,
                precision: of(&|r| r.test.overall.precision),
                recall: of(&|r| r.test.overall.recall),
                f1: of(&|r| r.test.overall.f1),
                orth: of(&|r| r.final_orth),
            }
        })
        .collect();
    Ok(AblationReport { runs, summary })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rows_switch_the_right_modules() {
        let base = TrainConfig::default();
        let (m, t) = AblationRow::by_name("vanilla").unwrap().apply(&ModelConfig::default(), &base, 3);
        assert!(!m.regularity);
        assert_eq!((t.lambda_agnostic, t.lambda_orth, t.seed), (0.0, 0.0, 3));
        assert!(!t.uses_agnostic());
        let (m, t) = AblationRow::by_name("full").unwrap().apply(&ModelConfig::default(), &base, 0);
        assert!(m.regularity);
        assert_eq!((t.lambda_aware, t.lambda_agnostic, t.lambda_orth), (1.0, 1.0, 0.5));
    }

    #[test]
    fn mean_sd() {
        let m = MeanSd::of(&[1.0, 2.0, 3.0]);
        assert_eq!(m.mean, 2.0);
        assert!((m.sd - 1.0).abs() < 1e-12);
        assert_eq!(MeanSd::of(&[4.0]).sd, 0.0);
    }
}
