//! Central finite-difference audit of analytic gradients.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::corpus::{GoldEntity, Sentence, Vocab};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{Dropout, LossWeights, Model, ModelConfig};
use crate::params::{Gradients, ParamStore};

#[derive(Debug, Clone)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub worst_index: usize,
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub params: Vec<ParamCheck>,
}

impl GradCheckReport {
    pub fn worst(&self) -> f64 {
        self.params
            .iter()
            .map(|p| p.max_rel_error)
            .fold(0.0, f64::max)
    }

    pub fn worst_param(&self) -> Option<&ParamCheck> {
        self.params
            .iter()
            .max_by(|a, b| a.max_rel_error.total_cmp(&b.max_rel_error))
    }
}

/// `|a - n| / max(1, |a|, |n|)`
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / 1f64.max(analytic.abs()).max(numeric.abs())
}

fn eval<F>(params: &ParamStore, build: &F) -> Result<f64>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let mut g = Graph::new(params);
    let loss = build(&mut g)?;
    g.value(loss)
        .item()
        .ok_or_else(|| Error::Contract("loss is not a scalar".into()))
}

/// Compares backward-pass gradients with central differences for every
/// scalar entry of every parameter. `build` must be deterministic.
pub fn gradient_check<F>(params: &ParamStore, build: F, eps: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph<'_>) -> Result<Var>,
{
    let mut analytic = Gradients::zeros_like(params);
    let base = {
        let mut g = Graph::new(params);
        let loss = build(&mut g)?;
        g.backward(loss, &mut analytic)?;
        g.value(loss).item().unwrap_or(f64::NAN)
    };
    let again = eval(params, &build)?;
    if base.to_bits() != again.to_bits() {
        return Err(Error::Contract(format!(
            "loss closure is not deterministic ({base} vs {again})"
        )));
    }

    let mut probe = params.clone();
    let mut report = Vec::with_capacity(params.len());
    for (id, p) in params.iter() {
        let mut worst = 0.0f64;
        let mut worst_index = 0;
        for k in 0..p.value.numel() {
            let orig = p.value.data()[k];
            probe.value_mut(id).data_mut()[k] = orig + eps;
            let plus = eval(&probe, &build)?;
            probe.value_mut(id).data_mut()[k] = orig - eps;
            let minus = eval(&probe, &build)?;
            probe.value_mut(id).data_mut()[k] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            let err = relative_error(analytic.get(id)[k], numeric);
            if err > worst {
                worst = err;
                worst_index = k;
            }
        }
        report.push(ParamCheck {
            name: p.name.clone(),
            max_rel_error: worst,
            worst_index,
        });
    }
    Ok(GradCheckReport { params: report })
}

/// Sizes for the full-model audit.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AuditDims {
    /// Hidden size per LSTM direction.
    pub hidden: usize,
    pub embed: usize,
    /// Classes including NONE.
    pub classes: usize,
    pub mlp: usize,
    /// Sentence length.
    pub len: usize,
    pub layers: usize,
}

impl Default for AuditDims {
    fn default() -> Self {
        Self {
            hidden: 2,
            embed: 4,
            classes: 3,
            mlp: 3,
            len: 3,
            layers: 2,
        }
    }
}

/// Finite-difference check of the complete training objective (aware,
/// agnostic and orthogonality terms, default weights, dropout off) on a
/// random sentence with one random gold entity.
pub fn audit_model(dims: AuditDims, seed: u64) -> Result<GradCheckReport> {
    if dims.classes < 2 || dims.len == 0 {
        return Err(Error::Config("audit needs >= 2 classes and a non-empty sentence".into()));
    }
    let alphabet = ['a', 'b', 'c', 'd', 'e'];
    let types: Vec<String> = (1..dims.classes).map(|k| format!("T{k}")).collect();
    let vocab = Vocab::from_lists(alphabet.to_vec(), types.clone());
    let cfg = ModelConfig {
        embed_dim: dims.embed,
        hidden: dims.hidden,
        layers: dims.layers,
        mlp_dim: dims.mlp,
        ..ModelConfig::default()
    };
    let model = Model::new(cfg, vocab, seed)?;

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let chars: Vec<char> = (0..dims.len)
        .map(|_| alphabet[rng.gen_range(0..alphabet.len())])
        .collect();
    let start = rng.gen_range(0..dims.len);
    let end = rng.gen_range(start..dims.len);
    let kind = types[rng.gen_range(0..types.len())].clone();
    let sentence = Sentence::new(chars, vec![GoldEntity::new(start, end, kind)])?;
    let plan = model.plan(&sentence);
    let n = plan.len() as f64;
    let weights = LossWeights {
        aware: 1.0 / n,
        agnostic: 1.0 / n,
        orth: 0.5,
    };
    gradient_check(
        &model.params,
        |g| {
            let obj = model.objective(g, &sentence, &plan, None, weights, true, &mut Dropout::off())?;
            Ok(obj.loss)
        },
        1e-6,
    )
}
