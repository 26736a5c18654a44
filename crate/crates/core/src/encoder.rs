//! Character embeddings and the two task-specific BiLSTM stacks.

use rand_chacha::ChaCha8Rng;

use crate::corpus::Vocab;
use crate::error::{contract, Error, Result};
use crate::graph::{Graph, Var};
use crate::model::{init_uniform, DropoutPlacement, Dropout, ModelConfig};
use crate::params::{ParamId, ParamStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Branch {
    Aware,
    Agnostic,
}

impl Branch {
    pub fn name(self) -> &'static str {
        match self {
            Branch::Aware => "aware",
            Branch::Agnostic => "agnostic",
        }
    }
}

/// One LSTM direction. Gate blocks along the `4d` axis are ordered
/// input, forget, candidate, output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LstmParams {
    pub w_in: ParamId,
    pub w_rec: ParamId,
    pub bias: ParamId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BranchParams {
    /// `[forward, backward]` per layer.
    pub layers: Vec<[LstmParams; 2]>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EncoderParams {
    pub embedding: ParamId,
    pub aware: BranchParams,
    pub agnostic: BranchParams,
}

impl EncoderParams {
    pub fn branch(&self, b: Branch) -> &BranchParams {
        match b {
            Branch::Aware => &self.aware,
            Branch::Agnostic => &self.agnostic,
        }
    }

    pub(crate) fn create(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        vocab: &Vocab,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let e = cfg.embed_dim;
        let embedding = store.add(
            "embedding",
            init_uniform(rng, &[vocab.num_chars(), e], 3f64.sqrt() * 0.5),
        )?;
        let mut branch = |b: Branch, store: &mut ParamStore| -> Result<BranchParams> {
            let d = cfg.hidden;
            let bound = 1.0 / (d as f64).sqrt();
            let mut layers = Vec::with_capacity(cfg.layers);
            for layer in 0..cfg.layers {
                let input = if layer == 0 { e } else { 2 * d };
                let mut dirs = Vec::with_capacity(2);
                for dir in ["fwd", "bwd"] {
                    let prefix = format!("enc.{}.l{layer}.{dir}", b.name());
                    dirs.push(LstmParams {
                        w_in: store.add(format!("{prefix}.w_in"), init_uniform(rng, &[input, 4 * d], bound))?,
                        w_rec: store.add(format!("{prefix}.w_rec"), init_uniform(rng, &[d, 4 * d], bound))?,
                        bias: store.add(format!("{prefix}.bias"), crate::tensor::Tensor::zeros(&[1, 4 * d]))?,
                    });
                }
                layers.push([dirs[0], dirs[1]]);
            }
            Ok(BranchParams { layers })
        };
        let aware = branch(Branch::Aware, store)?;
        let agnostic = branch(Branch::Agnostic, store)?;
        Ok(Self {
            embedding,
            aware,
            agnostic,
        })
    }

    pub(crate) fn lookup(store: &ParamStore, layers: usize) -> Result<Self> {
        let branch = |b: Branch| -> Result<BranchParams> {
            let mut out = Vec::with_capacity(layers);
            for layer in 0..layers {
                let dir = |dir: &str| -> Result<LstmParams> {
                    let prefix = format!("enc.{}.l{layer}.{dir}", b.name());
                    Ok(LstmParams {
                        w_in: store.id(&format!("{prefix}.w_in"))?,
                        w_rec: store.id(&format!("{prefix}.w_rec"))?,
                        bias: store.id(&format!("{prefix}.bias"))?,
                    })
                };
                out.push([dir("fwd")?, dir("bwd")?]);
            }
            Ok(BranchParams { layers: out })
        };
        Ok(Self {
            embedding: store.id("embedding")?,
            aware: branch(Branch::Aware)?,
            agnostic: branch(Branch::Agnostic)?,
        })
    }
}

/// Embedding rows for a sequence of character ids, `l x e`.
pub fn embed(g: &mut Graph<'_>, params: &EncoderParams, ids: &[usize]) -> Result<Var> {
    if ids.is_empty() {
        return contract("cannot embed an empty sentence");
    }
    let table = g.param(params.embedding);
    g.gather_rows(table, ids)
}

/// Runs one LSTM direction over the rows of `x` (`l x in`), returning the
/// hidden states in position order (`l x d`). Initial states are zero.
pub fn lstm_direction(g: &mut Graph<'_>, x: Var, p: &LstmParams, reverse: bool) -> Result<Var> {
    let l = g.value(x).rows();
    let w_in = g.param(p.w_in);
    let w_rec = g.param(p.w_rec);
    let bias = g.param(p.bias);
    let d = g.value(w_rec).rows();
    let proj = g.matmul(x, w_in)?;
    let proj = g.add_row(proj, bias)?;

    let mut outputs: Vec<Option<Var>> = vec![None; l];
    let mut state: Option<(Var, Var)> = None;
    let order: Vec<usize> = if reverse {
        (0..l).rev().collect()
    } else {
        (0..l).collect()
    };
    for t in order {
        let mut pre = g.slice_rows(proj, t, 1)?;
        if let Some((h_prev, _)) = state {
            let rec = g.matmul(h_prev, w_rec)?;
            pre = g.add(pre, rec)?;
        }
        let sig = g.sigmoid(pre)?;
        let input_gate = g.slice_cols(sig, 0, d)?;
        let forget_gate = g.slice_cols(sig, d, d)?;
        let out_gate = g.slice_cols(sig, 3 * d, d)?;
        let cand_pre = g.slice_cols(pre, 2 * d, d)?;
        let cand = g.tanh(cand_pre)?;
        let mut cell = g.mul(input_gate, cand)?;
        if let Some((_, c_prev)) = state {
            let kept = g.mul(forget_gate, c_prev)?;
            cell = g.add(kept, cell)?;
        }
        let squashed = g.tanh(cell)?;
        let h = g.mul(out_gate, squashed)?;
        outputs[t] = Some(h);
        state = Some((h, cell));
    }
    let rows: Vec<Var> = outputs.into_iter().map(|v| v.expect("every step")).collect();
    g.concat_rows(&rows)
}

/// Stacked BiLSTM over `x` (`l x e`), returning `l x 2d`.
pub fn bilstm_encode(
    g: &mut Graph<'_>,
    x: Var,
    branch: &BranchParams,
    cfg: &ModelConfig,
    dropout: &mut Dropout,
) -> Result<Var> {
    if branch.layers.is_empty() {
        return Err(Error::Contract("BiLSTM needs at least one layer".into()));
    }
    let mut input = x;
    let n = branch.layers.len();
    for (k, [fwd, bwd]) in branch.layers.iter().enumerate() {
        let f = lstm_direction(g, input, fwd, false)?;
        let b = lstm_direction(g, input, bwd, true)?;
        let mut out = g.concat_cols(&[f, b])?;
        let last = k + 1 == n;
        let apply = match cfg.lstm_dropout_at {
            DropoutPlacement::Between => !last,
            DropoutPlacement::Output => last,
            DropoutPlacement::Both => true,
        };
        if apply {
            out = dropout.apply(g, out, cfg.lstm_dropout)?;
        }
        input = out;
    }
    Ok(input)
}

/// Overrides embedding rows from a text file of `char v1 ... ve` lines.
/// A leading `count dim` header line is skipped. Returns the number of rows
/// replaced.
pub fn load_pretrained(
    text: &str,
    vocab: &Vocab,
    store: &mut ParamStore,
    embedding: ParamId,
) -> Result<usize> {
    let dim = store.value(embedding).cols();
    let mut replaced = 0;
    for (k, line) in text.lines().enumerate() {
        let mut parts = line.split_whitespace();
        let Some(head) = parts.next() else { continue };
        let rest: Vec<&str> = parts.collect();
        if k == 0 && rest.len() == 1 && head.parse::<usize>().is_ok() && rest[0].parse::<usize>().is_ok() {
            continue;
        }
        let mut chars = head.chars();
        let (Some(c), None) = (chars.next(), chars.next()) else {
            return Err(Error::Parse {
                line: k + 1,
                msg: format!("expected a single character, got {head:?}"),
            });
        };
        if rest.len() != dim {
            return Err(Error::Parse {
                line: k + 1,
                msg: format!("expected {dim} values, got {}", rest.len()),
            });
        }
        let values = rest
            .iter()
            .map(|v| v.parse::<f64>())
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| Error::Parse {
                line: k + 1,
                msg: e.to_string(),
            })?;
        let id = vocab.char_id(c);
        if id == crate::corpus::UNK_ID {
            continue;
        }
        store.value_mut(embedding).data_mut()[id * dim..(id + 1) * dim].copy_from_slice(&values);
        replaced += 1;
    }
    Ok(replaced)
}
