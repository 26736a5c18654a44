//! Joint optimization of the three losses with Adam.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::Sentence;
use crate::decode::{evaluate_model, EvalReport, OverlapMode};
use crate::error::{config, contract, Error, Result};
use crate::exec::{map_indexed, Execution};
use crate::graph::Graph;
use crate::model::{Dropout, LossWeights, Model};
use crate::params::{Gradients, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossNorm {
    /// Each component is averaged over a sentence's spans, then over the
    /// sentences of the batch.
    #[default]
    Sentence,
    /// Each component is averaged over all spans of the batch.
    Span,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lambda_aware: f64,
    pub lambda_agnostic: f64,
    pub lambda_orth: f64,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,
    /// Global gradient-norm cap; 0 disables clipping.
    pub clip_norm: f64,
    /// Evaluate on dev every this many epochs (and after the last); 0 never.
    pub eval_every: usize,
    pub loss_norm: LossNorm,
    /// Fraction of NONE spans entering the aware loss during training;
    /// 1.0 keeps all.
    pub negative_keep_rate: f64,
    pub execution: Execution,
    /// Overlap handling when decoding dev predictions.
    pub overlap: OverlapMode,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda_aware: 1.0,
            lambda_agnostic: 1.0,
            lambda_orth: 0.5,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            batch_size: 8,
            epochs: 30,
            seed: 0,
            clip_norm: 5.0,
            eval_every: 1,
            loss_norm: LossNorm::Sentence,
            negative_keep_rate: 1.0,
            execution: Execution::Parallel,
            overlap: OverlapMode::Nested,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("train.lambda_aware", self.lambda_aware),
            ("train.lambda_agnostic", self.lambda_agnostic),
            ("train.lambda_orth", self.lambda_orth),
            ("train.clip_norm", self.clip_norm),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return config(format!("{name} = {v} must be a finite value >= 0"));
            }
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return config(format!("train.lr = {} must be > 0", self.lr));
        }
        for (name, v) in [("train.beta1", self.beta1), ("train.beta2", self.beta2)] {
            if !(0.0..1.0).contains(&v) {
                return config(format!("{name} = {v} not in [0, 1)"));
            }
        }
        if !(self.eps > 0.0 && self.eps.is_finite()) {
            return config("train.eps must be > 0");
        }
        if !(self.negative_keep_rate > 0.0 && self.negative_keep_rate <= 1.0) {
            return config(format!(
                "train.negative_keep_rate = {} not in (0, 1]",
                self.negative_keep_rate
            ));
        }
        if self.batch_size == 0 {
            return config("train.batch_size must be positive");
        }
        Ok(())
    }

    /// The agnostic encoder only runs when one of its losses is weighted.
    pub fn uses_agnostic(&self) -> bool {
        self.lambda_agnostic > 0.0 || self.lambda_orth > 0.0
    }
}

/// `lambda_aware * aware + lambda_agnostic * agnostic + lambda_orth * orth`.
pub fn total_loss(aware: f64, agnostic: f64, orth: f64, cfg: &TrainConfig) -> Result<f64> {
    for (branch, v) in [("aware", aware), ("agnostic", agnostic), ("orthogonality", orth)] {
        if !v.is_finite() {
            return Err(Error::Numeric {
                op: format!("{branch} loss"),
            });
        }
    }
    Ok(cfg.lambda_aware * aware + cfg.lambda_agnostic * agnostic + cfg.lambda_orth * orth)
}

/// Adam moment buffers, one pair per parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ParamStore) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, p)| vec![0.0; p.value.numel()]).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Clips `grads` to the global norm cap, applies one bias-corrected Adam
/// update and zeroes `grads`.
pub fn adam_step(
    params: &mut ParamStore,
    state: &mut OptimizerState,
    grads: &mut Gradients,
    cfg: &TrainConfig,
) -> Result<()> {
    if state.m.len() != params.len() || grads.len() != params.len() {
        return contract("optimizer state does not match the parameter store");
    }
    for (id, g) in grads.iter() {
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numeric {
                op: format!("gradient of {}", params.get(id).name),
            });
        }
    }
    if cfg.clip_norm > 0.0 {
        let norm = grads.global_norm();
        if norm > cfg.clip_norm {
            grads.scale(cfg.clip_norm / norm);
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        let k = id.index();
        let g = grads.get(id);
        let (m, v) = (&mut state.m[k], &mut state.v[k]);
        let w = params.value_mut(id).data_mut();
        for i in 0..w.len() {
            m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
            v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
            let m_hat = m[i] / c1;
            let v_hat = v[i] / c2;
            w[i] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    grads.zero();
    Ok(())
}

/// Component means of one batch. Absent components were not computed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BatchLoss {
    pub total: f64,
    pub aware: f64,
    pub agnostic: Option<f64>,
    pub orth: Option<f64>,
}

/// Seed for one (epoch, sentence, purpose) random stream.
fn stream_seed(seed: u64, epoch: u64, index: u64, purpose: u64) -> [u8; 32] {
    let mut out = [0u8; 32];
    for (k, v) in [seed, epoch, index, purpose].into_iter().enumerate() {
        out[k * 8..k * 8 + 8].copy_from_slice(&v.to_le_bytes());
    }
    out
}

const SHUFFLE: u64 = 1;
const DROPOUT: u64 = 2;

/// Spans entering the aware loss: every entity span plus a random share of
/// NONE spans. `None` keeps everything.
fn sample_negatives(types: &[usize], rate: f64, seed: [u8; 32]) -> Option<Vec<usize>> {
    if rate >= 1.0 {
        return None;
    }
    let mut rng = ChaCha8Rng::from_seed(seed);
    rng.set_stream(1);
    Some(
        types
            .iter()
            .enumerate()
            .filter(|&(_, &t)| t != 0 || rng.gen_bool(rate))
            .map(|(k, _)| k)
            .collect(),
    )
}

/// Loss and summed gradient of a batch. Sentence gradients are computed
/// independently and reduced in batch order. `seeds` drive dropout and
/// negative sampling per sentence; `None` runs in eval mode.
pub fn batch_gradients(
    model: &Model,
    batch: &[&Sentence],
    cfg: &TrainConfig,
    seeds: Option<&[[u8; 32]]>,
) -> Result<(BatchLoss, Gradients)> {
    if batch.is_empty() {
        return contract("empty batch");
    }
    if seeds.is_some_and(|s| s.len() != batch.len()) {
        return contract("one seed per sentence required");
    }
    let with_agnostic = cfg.uses_agnostic();
    let plans: Vec<_> = batch.iter().map(|s| model.plan(s)).collect();
    let keeps: Vec<Option<Vec<usize>>> = plans
        .iter()
        .enumerate()
        .map(|(k, p)| seeds.and_then(|s| sample_negatives(&p.types, cfg.negative_keep_rate, s[k])))
        .collect();
    let aware_counts: Vec<usize> = plans
        .iter()
        .zip(&keeps)
        .map(|(p, k)| k.as_ref().map_or(p.len(), Vec::len))
        .collect();
    let total_aware: usize = aware_counts.iter().sum();
    let total_spans: usize = plans.iter().map(|p| p.len()).sum();
    let b = batch.len() as f64;
    // share of each sentence's summed components in the batch mean
    let shares: Vec<(f64, f64)> = plans
        .iter()
        .zip(&aware_counts)
        .map(|(p, &n)| match cfg.loss_norm {
            LossNorm::Sentence => (1.0 / (b * n.max(1) as f64), 1.0 / (b * p.len() as f64)),
            LossNorm::Span => (1.0 / total_aware.max(1) as f64, 1.0 / total_spans as f64),
        })
        .collect();

    let items: Vec<usize> = (0..batch.len()).collect();
    let results = map_indexed(&items, cfg.execution, |_, &k| -> Result<_> {
        let mut dropout = match seeds {
            Some(s) => Dropout::from_seed(s[k]),
            None => Dropout::off(),
        };
        let weights = LossWeights {
            aware: cfg.lambda_aware * shares[k].0,
            agnostic: cfg.lambda_agnostic * shares[k].1,
            orth: cfg.lambda_orth / b,
        };
        let mut g = Graph::new(&model.params);
        let obj = model.objective(
            &mut g,
            batch[k],
            &plans[k],
            keeps[k].as_deref(),
            weights,
            with_agnostic,
            &mut dropout,
        )?;
        let mut grads = Gradients::zeros_like(&model.params);
        g.backward(obj.loss, &mut grads)?;
        Ok((obj, grads))
    });

    let mut grads = Gradients::zeros_like(&model.params);
    let (mut aware, mut agnostic, mut orth) = (0.0, 0.0, 0.0);
    for (k, r) in results.into_iter().enumerate() {
        let (obj, g) = r?;
        grads.accumulate(&g);
        aware += obj.aware_sum * shares[k].0;
        agnostic += obj.agnostic_sum.unwrap_or(0.0) * shares[k].1;
        orth += obj.orth.unwrap_or(0.0) / b;
    }
    let total = total_loss(aware, agnostic, orth, cfg)?;
    Ok((
        BatchLoss {
            total,
            aware,
            agnostic: with_agnostic.then_some(agnostic),
            orth: with_agnostic.then_some(orth),
        },
        grads,
    ))
}

/// Eval-mode loss of a batch; used to compare models bit for bit.
pub fn probe_loss(model: &Model, batch: &[Sentence], cfg: &TrainConfig) -> Result<BatchLoss> {
    let refs: Vec<&Sentence> = batch.iter().collect();
    Ok(batch_gradients(model, &refs, cfg, None)?.0)
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss_aware: f64,
    pub loss_agnostic: Option<f64>,
    pub loss_orth: Option<f64>,
    pub dev_p: Option<f64>,
    pub dev_r: Option<f64>,
    pub dev_f1: Option<f64>,
}

/// Hooks called after every epoch, e.g. to persist the log and the best
/// checkpoint as training proceeds.
pub trait TrainObserver {
    /// `best` is set when this epoch's model is the new best.
    fn on_epoch(&mut self, record: &EpochRecord, model: &Model, best: bool) -> Result<()>;
}

impl TrainObserver for () {
    fn on_epoch(&mut self, _: &EpochRecord, _: &Model, _: bool) -> Result<()> {
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Best model by dev F1; the last epoch's model without dev evaluation.
    pub best: Model,
    pub last: Model,
    pub log: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_dev: Option<EvalReport>,
}

fn diverged(epoch: usize, e: Error) -> Error {
    match e {
        Error::Numeric { op } => Error::Diverged {
            epoch,
            reason: format!("non-finite value in {op}"),
        },
        other => other,
    }
}

/// Trains `model` in place on `train`. Dev F1 selects the best epoch. On
/// divergence the observer has already received every good epoch, and the
/// error names the epoch.
pub fn train(
    mut model: Model,
    train: &[Sentence],
    dev: &[Sentence],
    cfg: &TrainConfig,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() {
        return contract("training corpus is empty");
    }
    if let Some(k) = train.iter().position(|s| s.is_empty()) {
        return contract(format!("training sentence {k} is empty"));
    }
    let excluded: usize = train.iter().map(|s| model.plan(s).excluded).sum();
    if excluded > 0 {
        log::warn!("{excluded} gold entities exceed max_span_len and are excluded from the loss");
    }
    let mut state = OptimizerState::new(&model.params);
    let mut grads = Gradients::zeros_like(&model.params);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, Model, usize, Option<EvalReport>)> = None;

    for epoch in 1..=cfg.epochs {
        let mut rng = ChaCha8Rng::from_seed(stream_seed(cfg.seed, epoch as u64, 0, SHUFFLE));
        order.shuffle(&mut rng);
        let (mut aware, mut agnostic, mut orth, mut batches) = (0.0, 0.0, 0.0, 0usize);
        let mut saw_agnostic = false;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sentence> = chunk.iter().map(|&k| &train[k]).collect();
            let seeds: Vec<[u8; 32]> = (0..chunk.len())
                .map(|k| stream_seed(cfg.seed, epoch as u64, (bi * cfg.batch_size + k) as u64, DROPOUT))
                .collect();
            let (loss, batch_grads) =
                batch_gradients(&model, &batch, cfg, Some(&seeds)).map_err(|e| diverged(epoch, e))?;
            grads.accumulate(&batch_grads);
            adam_step(&mut model.params, &mut state, &mut grads, cfg).map_err(|e| diverged(epoch, e))?;
            aware += loss.aware;
            if let (Some(a), Some(o)) = (loss.agnostic, loss.orth) {
                saw_agnostic = true;
                agnostic += a;
                orth += o;
            }
            batches += 1;
        }
        let n = batches as f64;
        let mut record = EpochRecord {
            epoch,
            loss_aware: aware / n,
            loss_agnostic: saw_agnostic.then_some(agnostic / n),
            loss_orth: saw_agnostic.then_some(orth / n),
            dev_p: None,
            dev_r: None,
            dev_f1: None,
        };

        let evaluate_now = !dev.is_empty() && cfg.eval_every > 0 && (epoch % cfg.eval_every == 0 || epoch == cfg.epochs);
        let mut is_best = false;
        if evaluate_now {
            let report = evaluate_model(&model, dev, cfg.overlap, cfg.execution)?;
            record.dev_p = Some(report.overall.precision);
            record.dev_r = Some(report.overall.recall);
            record.dev_f1 = Some(report.overall.f1);
            if best.as_ref().is_none_or(|b| report.overall.f1 > b.0) {
                best = Some((report.overall.f1, model.clone(), epoch, Some(report)));
                is_best = true;
            }
        } else if dev.is_empty() || cfg.eval_every == 0 {
            best = Some((f64::NAN, model.clone(), epoch, None));
            is_best = true;
        }
        log::info!(
            "epoch {epoch}: aware {:.5} agnostic {:?} orth {:?} dev_f1 {:?}",
            record.loss_aware,
            record.loss_agnostic,
            record.loss_orth,
            record.dev_f1
        );
        observer.on_epoch(&record, &model, is_best)?;
        log.push(record);
    }

    let (best_model, best_epoch, best_dev) = match best {
        Some((_, m, e, r)) => (m, e, r),
        None => (model.clone(), 0, None),
    };
    Ok(TrainOutcome {
        best: best_model,
        last: model,
        log,
        best_epoch,
        best_dev,
    })
}
