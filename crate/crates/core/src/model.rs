//! The full two-branch span recognizer: configuration, parameters and the
//! per-sentence forward passes.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::agnostic::{self, AgnosticParams, BoundaryGrid};
use crate::aware::{self, AwareParams, Fusion, Pooling, SpanTypeGrid};
use crate::corpus::{Sentence, Vocab};
use crate::encoder::{self, Branch, EncoderParams};
use crate::error::{config, contract, Error, Result};
use crate::graph::{Graph, Var};
use crate::orth;
use crate::params::ParamStore;
use crate::spans::{enumerate_spans, SpanGrid};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DropoutPlacement {
    #[default]
    Between,
    Output,
    Both,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub embed_dim: usize,
    /// Hidden size per LSTM direction.
    pub hidden: usize,
    pub layers: usize,
    /// Output size of the head/tail projections in the agnostic branch.
    pub mlp_dim: usize,
    pub embed_dropout: f64,
    pub lstm_dropout: f64,
    pub lstm_dropout_at: DropoutPlacement,
    pub mlp_dropout: f64,
    /// Longest span enumerated; `None` enumerates all.
    pub max_span_len: Option<usize>,
    pub pooling: Pooling,
    pub fusion: Fusion,
    /// Separate head/tail projections before the aware biaffine.
    pub span_mlp: bool,
    /// Pool and fuse regularity features. Off gives the plain biaffine
    /// classifier.
    pub regularity: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            embed_dim: 64,
            hidden: 200,
            layers: 3,
            mlp_dim: 150,
            embed_dropout: 0.1,
            lstm_dropout: 0.4,
            lstm_dropout_at: DropoutPlacement::Between,
            mlp_dropout: 0.2,
            max_span_len: None,
            pooling: Pooling::Attention,
            fusion: Fusion::Gate,
            span_mlp: false,
            regularity: true,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("model.embed_dim", self.embed_dim),
            ("model.hidden", self.hidden),
            ("model.layers", self.layers),
            ("model.mlp_dim", self.mlp_dim),
        ] {
            if v == 0 {
                return config(format!("{name} must be positive"));
            }
        }
        for (name, v) in [
            ("model.embed_dropout", self.embed_dropout),
            ("model.lstm_dropout", self.lstm_dropout),
            ("model.mlp_dropout", self.mlp_dropout),
        ] {
            if !(0.0..1.0).contains(&v) {
                return config(format!("{name} = {v} not in [0, 1)"));
            }
        }
        if self.max_span_len == Some(0) {
            return config("model.max_span_len must be positive");
        }
        Ok(())
    }
}

pub(crate) fn init_uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let mut t = Tensor::zeros(shape);
    for v in t.data_mut() {
        *v = rng.gen_range(-bound..=bound);
    }
    t
}

/// Train-time dropout source. `off()` makes every dropout the identity.
pub struct Dropout {
    rng: Option<ChaCha8Rng>,
}

impl Dropout {
    pub fn off() -> Self {
        Self { rng: None }
    }

    pub fn seeded(seed: u64) -> Self {
        Self {
            rng: Some(ChaCha8Rng::seed_from_u64(seed)),
        }
    }

    pub fn from_seed(seed: [u8; 32]) -> Self {
        Self {
            rng: Some(ChaCha8Rng::from_seed(seed)),
        }
    }

    pub fn is_active(&self) -> bool {
        self.rng.is_some()
    }

    pub fn apply(&mut self, g: &mut Graph<'_>, x: Var, rate: f64) -> Result<Var> {
        match &mut self.rng {
            Some(rng) => g.dropout(x, rate, rng),
            None => Ok(x),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ModelIds {
    pub encoder: EncoderParams,
    pub aware: AwareParams,
    pub agnostic: AgnosticParams,
}

/// Spans of one sentence together with their training targets.
#[derive(Debug, Clone, PartialEq)]
pub struct SpanPlan {
    pub spans: Vec<(usize, usize)>,
    pub types: Vec<usize>,
    pub binary: Vec<f64>,
    /// Gold entities longer than the span cap, so never enumerated.
    pub excluded: usize,
}

impl SpanPlan {
    pub fn len(&self) -> usize {
        self.spans.len()
    }

    pub fn is_empty(&self) -> bool {
        self.spans.is_empty()
    }
}

/// Per-sentence weights applied to the summed loss components.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossWeights {
    pub aware: f64,
    pub agnostic: f64,
    pub orth: f64,
}

/// Weighted loss on the graph plus the raw component values.
#[derive(Debug, Clone)]
pub struct Objective {
    pub loss: Var,
    pub aware_sum: f64,
    pub aware_count: usize,
    pub agnostic_sum: Option<f64>,
    pub agnostic_count: usize,
    pub orth: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub vocab: Vocab,
    pub params: ParamStore,
    pub ids: ModelIds,
}

impl Model {
    pub fn new(config: ModelConfig, vocab: Vocab, seed: u64) -> Result<Self> {
        config.validate()?;
        if vocab.num_classes() < 2 {
            return contract("vocabulary has no entity types");
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = EncoderParams::create(&mut params, &config, &vocab, &mut rng)?;
        let aware = AwareParams::create(&mut params, &config, vocab.num_classes(), &mut rng)?;
        let agnostic = AgnosticParams::create(&mut params, &config, &mut rng)?;
        Ok(Self {
            config,
            vocab,
            params,
            ids: ModelIds {
                encoder,
                aware,
                agnostic,
            },
        })
    }

    /// Rebinds a loaded parameter store, checking every expected tensor.
    pub fn from_parts(config: ModelConfig, vocab: Vocab, params: ParamStore) -> Result<Self> {
        config.validate()?;
        let reference = Model::new(config.clone(), vocab.clone(), 0)?;
        if reference.params.len() != params.len() {
            return contract(format!(
                "expected {} parameters, found {}",
                reference.params.len(),
                params.len()
            ));
        }
        for (_, p) in reference.params.iter() {
            let id = params.id(&p.name)?;
            let found = params.value(id).shape();
            if found != p.value.shape() {
                return Err(Error::Shape {
                    op: "checkpoint",
                    left: p.value.shape().to_vec(),
                    right: found.to_vec(),
                });
            }
        }
        let ids = ModelIds {
            encoder: EncoderParams::lookup(&params, config.layers)?,
            aware: AwareParams::lookup(&params, &config)?,
            agnostic: AgnosticParams::lookup(&params)?,
        };
        Ok(Self {
            config,
            vocab,
            params,
            ids,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.vocab.num_classes()
    }

    pub fn char_ids(&self, sentence: &Sentence) -> Result<Vec<usize>> {
        if sentence.is_empty() {
            return contract("sentence has no characters");
        }
        Ok(self.vocab.encode(&sentence.chars))
    }

    pub fn spans(&self, len: usize) -> Vec<(usize, usize)> {
        enumerate_spans(len, self.config.max_span_len)
    }

    pub fn plan(&self, sentence: &Sentence) -> SpanPlan {
        let spans = self.spans(sentence.len());
        let cap = self.config.max_span_len.unwrap_or(usize::MAX);
        let mut excluded = 0;
        let mut gold = Vec::new();
        for e in &sentence.entities {
            if e.len() > cap {
                excluded += 1;
                continue;
            }
            // types unseen in the vocabulary still count as entities for the
            // boundary target, but are NONE for the type target
            gold.push((e.start, e.end, self.vocab.type_id(&e.kind).unwrap_or(0)));
        }
        let types = aware::type_targets(&spans, &gold);
        let binary = agnostic::boundary_targets(&spans, &gold);
        SpanPlan {
            spans,
            types,
            binary,
            excluded,
        }
    }

    /// Shared embedding lookup (with embedding dropout) for both branches.
    pub fn embed(&self, g: &mut Graph<'_>, ids: &[usize], dropout: &mut Dropout) -> Result<Var> {
        let x = encoder::embed(g, &self.ids.encoder, ids)?;
        dropout.apply(g, x, self.config.embed_dropout)
    }

    pub fn encode_branch(&self, g: &mut Graph<'_>, x: Var, branch: Branch, dropout: &mut Dropout) -> Result<Var> {
        encoder::bilstm_encode(g, x, self.ids.encoder.branch(branch), &self.config, dropout)
    }

    /// Builds the weighted training loss for one sentence.
    ///
    /// `keep` restricts which spans enter the aware loss; the agnostic
    /// branch and the orthogonality term are evaluated only when
    /// `with_agnostic` is set.
    #[allow(clippy::too_many_arguments)]
    pub fn objective(
        &self,
        g: &mut Graph<'_>,
        sentence: &Sentence,
        plan: &SpanPlan,
        keep: Option<&[usize]>,
        weights: LossWeights,
        with_agnostic: bool,
        dropout: &mut Dropout,
    ) -> Result<Objective> {
        let ids = self.char_ids(sentence)?;
        let x = self.embed(g, &ids, dropout)?;
        let h_aware = self.encode_branch(g, x, Branch::Aware, dropout)?;
        let out = aware::classify_spans(g, h_aware, &self.ids.aware, &self.config, plan.spans.clone())?;
        let aware_sum = aware::aware_loss_sum(g, out.logits, &plan.types, keep)?;
        let aware_count = keep.map_or(plan.len(), <[usize]>::len);
        let mut loss = g.affine(aware_sum, weights.aware, 0.0)?;
        let aware_value = g.value(aware_sum).item().unwrap_or(f64::NAN);

        let (mut agnostic_sum, mut orth_value) = (None, None);
        if with_agnostic {
            let h_agn = self.encode_branch(g, x, Branch::Agnostic, dropout)?;
            let (head, tail) = agnostic::project_head_tail(
                g,
                h_agn,
                &self.ids.agnostic,
                self.config.mlp_dropout,
                dropout,
            )?;
            let probs = agnostic::boundary_scores(g, head, tail, &self.ids.agnostic, &plan.spans)?;
            let bce = agnostic::agnostic_loss_sum(g, probs, &plan.binary)?;
            agnostic_sum = g.value(bce).item();
            let weighted = g.affine(bce, weights.agnostic, 0.0)?;
            loss = g.add(loss, weighted)?;

            let o = orth::orth_loss(g, h_aware, h_agn)?;
            orth_value = g.value(o).item();
            let weighted = g.affine(o, weights.orth, 0.0)?;
            loss = g.add(loss, weighted)?;
        }
        Ok(Objective {
            loss,
            aware_sum: aware_value,
            aware_count,
            agnostic_sum,
            agnostic_count: if with_agnostic { plan.len() } else { 0 },
            orth: orth_value,
        })
    }

    /// Eval-mode type distributions for every span.
    pub fn classify(&self, sentence: &Sentence) -> Result<SpanTypeGrid> {
        let mut g = Graph::new(&self.params);
        let mut off = Dropout::off();
        let ids = self.char_ids(sentence)?;
        let x = self.embed(&mut g, &ids, &mut off)?;
        let h = self.encode_branch(&mut g, x, Branch::Aware, &mut off)?;
        let out = aware::classify_spans(&mut g, h, &self.ids.aware, &self.config, self.spans(ids.len()))?;
        SpanTypeGrid::from_output(&g, &out, ids.len(), self.config.max_span_len)
    }

    /// Eval-mode entity probabilities from the agnostic branch. Diagnostic
    /// only; decoding never uses it.
    pub fn boundary_grid(&self, sentence: &Sentence) -> Result<BoundaryGrid> {
        let mut g = Graph::new(&self.params);
        let mut off = Dropout::off();
        let ids = self.char_ids(sentence)?;
        let x = self.embed(&mut g, &ids, &mut off)?;
        let h = self.encode_branch(&mut g, x, Branch::Agnostic, &mut off)?;
        let (head, tail) = agnostic::project_head_tail(&mut g, h, &self.ids.agnostic, 0.0, &mut off)?;
        let spans = self.spans(ids.len());
        let probs = agnostic::boundary_scores(&mut g, head, tail, &self.ids.agnostic, &spans)?;
        SpanGrid::new(ids.len(), self.config.max_span_len, g.value(probs).data().to_vec())
    }

    /// Eval-mode orthogonality penalty of one sentence.
    pub fn orth_value(&self, sentence: &Sentence) -> Result<f64> {
        let mut g = Graph::new(&self.params);
        let mut off = Dropout::off();
        let ids = self.char_ids(sentence)?;
        let x = self.embed(&mut g, &ids, &mut off)?;
        let a = self.encode_branch(&mut g, x, Branch::Aware, &mut off)?;
        let b = self.encode_branch(&mut g, x, Branch::Agnostic, &mut off)?;
        let o = orth::orth_loss(&mut g, a, b)?;
        Ok(g.value(o).item().unwrap_or(f64::NAN))
    }
}
