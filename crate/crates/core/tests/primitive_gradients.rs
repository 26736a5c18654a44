//! Randomized finite-difference checks of every differentiable primitive.
//! Each case draws fresh shapes and values; the loss is a fixed weighted sum
//! of the primitive's output so that every output entry matters.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use regspan::encoder::{lstm_direction, LstmParams};
use regspan::gradcheck::gradient_check;
use regspan::graph::{Graph, Var};
use regspan::params::{ParamId, ParamStore};
use regspan::spans::enumerate_spans;
use regspan::tensor::Tensor;
use regspan::Result;

const CASES: u64 = 100;
const EPS: f64 = 1e-5;
const TOL: f64 = 1e-6;

fn weighted_sum(g: &mut Graph<'_>, out: Var) -> Result<Var> {
    let shape = g.value(out).shape().to_vec();
    let n: usize = shape.iter().product();
    let w: Vec<f64> = (0..n).map(|k| (1.3 * k as f64 + 0.7).sin()).collect();
    let w = g.constant(Tensor::new(shape, w)?)?;
    let prod = g.mul(out, w)?;
    g.sum(prod)
}

struct Case {
    store: ParamStore,
    ids: Vec<ParamId>,
    rng: ChaCha8Rng,
}

impl Case {
    fn new(seed: u64) -> Self {
        Self {
            store: ParamStore::new(),
            ids: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn dim(&mut self, lo: usize, hi: usize) -> usize {
        self.rng.gen_range(lo..=hi)
    }

    fn input(&mut self, shape: &[usize], lo: f64, hi: f64) -> ParamId {
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| self.rng.gen_range(lo..hi)).collect();
        let id = self
            .store
            .add(format!("x{}", self.ids.len()), Tensor::new(shape.to_vec(), data).unwrap())
            .unwrap();
        self.ids.push(id);
        id
    }

    fn matrix(&mut self, r: usize, c: usize) -> ParamId {
        self.input(&[r, c], -2.0, 2.0)
    }
}

fn run<S, B>(name: &str, setup: S)
where
    S: Fn(&mut Case) -> B,
    B: Fn(&mut Graph<'_>, &[ParamId]) -> Result<Var>,
{
    let mut worst = 0.0f64;
    for seed in 0..CASES {
        let mut case = Case::new(seed);
        let build = setup(&mut case);
        let ids = case.ids.clone();
        let report = gradient_check(
            &case.store,
            |g| {
                let out = build(g, &ids)?;
                weighted_sum(g, out)
            },
            EPS,
        )
        .unwrap_or_else(|e| panic!("{name} seed {seed}: {e}"));
        assert!(report.worst() < TOL, "{name} seed {seed}: {:?}", report.worst_param());
        worst = worst.max(report.worst());
    }
    eprintln!("{name}: worst relative error {worst:.2e} over {CASES} cases");
}

#[test]
fn matmul() {
    run("matmul", |c| {
        let (n, k, m) = (c.dim(1, 4), c.dim(1, 4), c.dim(1, 4));
        c.matrix(n, k);
        c.matrix(k, m);
        |g: &mut Graph<'_>, ids: &[ParamId]| {
            let (a, b) = (g.param(ids[0]), g.param(ids[1]));
            g.matmul(a, b)
        }
    });
}

#[test]
fn transpose() {
    run("transpose", |c| {
        let (n, m) = (c.dim(1, 5), c.dim(1, 5));
        c.matrix(n, m);
        |g: &mut Graph<'_>, ids: &[ParamId]| {
            let a = g.param(ids[0]);
            g.transpose(a)
        }
    });
}

#[test]
fn elementwise_binary() {
    run("add/sub/mul", |c| {
        let (n, m) = (c.dim(1, 4), c.dim(1, 4));
        c.matrix(n, m);
        c.matrix(n, m);
        |g: &mut Graph<'_>, ids: &[ParamId]| {
            let (a, b) = (g.param(ids[0]), g.param(ids[1]));
            let s = g.add(a, b)?;
            let d = g.sub(a, b)?;
            let p = g.mul(a, b)?;
            let sd = g.mul(s, d)?;
            g.add(sd, p)
        }
    });
}

#[test]
fn row_and_column_broadcasts() {
    run("add_row/mul_col", |c| {
        let (n, m) = (c.dim(1, 4), c.dim(1, 4));
        c.matrix(n, m);
        c.matrix(1, m);
        c.matrix(n, 1);
        |g: &mut Graph<'_>, ids: &[ParamId]| {
            let (a, r, k) = (g.param(ids[0]), g.param(ids[1]), g.param(ids[2]));
            let x = g.add_row(a, r)?;
            g.mul_col(x, k)
        }
    });
}

#[test]
fn affine() {
    run("affine", |c| {
        let (n, m) = (c.dim(1, 4), c.dim(1, 4));
        c.matrix(n, m);
        let (s, t) = (c.rng.gen_range(-3.0..3.0), c.rng.gen_range(-3.0..3.0));
        move |g: &mut Graph<'_>, ids: &[ParamId]| {
            let a = g.param(ids[0]);
            g.affine(a, s, t)
        }
    });
}

#[test]
fn tanh() {
    run("tanh", |c| {
        let (n, m) = (c.dim(1, 4), c.dim(1, 4));
        c.input(&[n, m], -3.0, 3.0);
        |g: &mut Graph<'_>, ids: &[ParamId]| {
            let a = g.param(ids[0]);
            g.tanh(a)
        }
    });
}

#[test]
fn sigmoid() {
    run("sigmoid", |c| {
        let (n, m) = (c.dim(1, 4), c.dim(1, 4));
        c.input(&[n, m], -5.0, 5.0);
        |g: &mut Graph<'_>, ids: &[ParamId]| {
            let a = g.param(ids[0]);
            g.sigmoid(a)
        }
    });
}

#[test]
fn exp() {
    run("exp", |c| {
        let (n, m) = (c.dim(1, 4), c.dim(1, 4));
        c.input(&[n, m], -2.0, 1.0);
        |g: &mut Graph<'_>, ids: &[ParamId]| {
            let a = g.param(ids[0]);
            g.exp(a)
        }
    });
}

#[test]
fn log_on_positive_inputs() {
    run("log", |c| {
        let (n, m) = (c.dim(1, 4), c.dim(1, 4));
        c.input(&[n, m], 0.2, 3.0);
        |g: &mut Graph<'_>, ids: &[ParamId]| {
            let a = g.param(ids[0]);
            g.log(a)
        }
    });
}

#[test]
fn clamp_away_from_bounds() {
    run("clamp", |c| {
        let (n, m) = (c.dim(1, 4), c.dim(1, 4));
        // inside (-1, 1) plus entries well outside on both sides
        let id = c.input(&[n, m], -0.9, 0.9);
        let data = c.store.value_mut(id).data_mut();
        for (k, v) in data.iter_mut().enumerate() {
            match k % 3 {
                1 => *v = 1.5 + v.abs(),
                2 => *v = -1.5 - v.abs(),
                _ => {}
            }
        }
        |g: &mut Graph<'_>, ids: &[ParamId]| {
            let a = g.param(ids[0]);
            g.clamp(a, -1.0, 1.0)
        }
    });
}

#[test]
fn concat_and_slice() {
    run("concat/slice", |c| {
        let (n, m1, m2) = (c.dim(1, 4), c.dim(1, 3), c.dim(1, 3));
        c.matrix(n, m1);
        c.matrix(n, m2);
        c.matrix(2, m1 + m2);
        let (start, len) = {
            let s = c.rng.gen_range(0..m1 + m2);
            (s, c.rng.gen_range(1..=m1 + m2 - s))
        };
        let row = c.rng.gen_range(0..n + 2);
        move |g: &mut Graph<'_>, ids: &[ParamId]| {
            let (a, b, r) = (g.param(ids[0]), g.param(ids[1]), g.param(ids[2]));
            let wide = g.concat_cols(&[a, b])?;
            let tall = g.concat_rows(&[wide, r])?;
            let cols = g.slice_cols(tall, start, len)?;
            let one = g.slice_rows(cols, row, 1)?;
            let back = g.concat_rows(&[cols, one])?;
            g.tanh(back)
        }
    });
}

#[test]
fn gather_rows_with_repeats() {
    run("gather_rows", |c| {
        let (n, m) = (c.dim(1, 4), c.dim(1, 3));
        c.matrix(n, m);
        let k = c.dim(1, 6);
        let idx: Vec<usize> = (0..k).map(|_| c.rng.gen_range(0..n)).collect();
        move |g: &mut Graph<'_>, ids: &[ParamId]| {
            let a = g.param(ids[0]);
            g.gather_rows(a, &idx)
        }
    });
}

#[test]
fn softmax_rows() {
    run("softmax_rows", |c| {
        let (n, m) = (c.dim(1, 4), c.dim(1, 5));
        c.input(&[n, m], -4.0, 4.0);
        |g: &mut Graph<'_>, ids: &[ParamId]| {
            let a = g.param(ids[0]);
            g.softmax_rows(a)
        }
    });
}

#[test]
fn log_softmax_and_pick() {
    run("log_softmax_rows/pick", |c| {
        let (n, m) = (c.dim(1, 4), c.dim(1, 5));
        c.input(&[n, m], -4.0, 4.0);
        let cols: Vec<usize> = (0..n).map(|_| c.rng.gen_range(0..m)).collect();
        move |g: &mut Graph<'_>, ids: &[ParamId]| {
            let a = g.param(ids[0]);
            let l = g.log_softmax_rows(a)?;
            let p = g.pick(l, &cols)?;
            g.concat_cols(&[p, p])
        }
    });
}

#[test]
fn dropout_with_fixed_mask() {
    run("dropout", |c| {
        let (n, m) = (c.dim(1, 4), c.dim(1, 4));
        c.matrix(n, m);
        let rate: f64 = c.rng.gen_range(0.0..0.8);
        let mask: Vec<f64> = (0..n * m)
            .map(|_| if c.rng.gen_bool(rate) { 0.0 } else { 1.0 / (1.0 - rate) })
            .collect();
        move |g: &mut Graph<'_>, ids: &[ParamId]| {
            let a = g.param(ids[0]);
            g.dropout_with_mask(a, mask.clone())
        }
    });
}

#[test]
fn reductions() {
    run("sum/mean", |c| {
        let (n, m) = (c.dim(1, 4), c.dim(1, 4));
        c.matrix(n, m);
        |g: &mut Graph<'_>, ids: &[ParamId]| {
            let a = g.param(ids[0]);
            let sq = g.mul(a, a)?;
            let s = g.sum(sq)?;
            let mu = g.mean(a)?;
            let s = g.tanh(s)?;
            g.concat_cols(&[s, mu])
        }
    });
}

fn random_spans(c: &mut Case, l: usize) -> Vec<(usize, usize)> {
    let all = enumerate_spans(l, None);
    let k = c.dim(1, all.len().min(6));
    (0..k).map(|_| all[c.rng.gen_range(0..all.len())]).collect()
}

#[test]
fn bilinear() {
    run("bilinear", |c| {
        let (n1, n2, p, q, r) = (c.dim(1, 4), c.dim(1, 4), c.dim(1, 3), c.dim(1, 3), c.dim(1, 3));
        c.matrix(n1, p);
        c.input(&[p, q, r], -1.0, 1.0);
        c.matrix(n2, r);
        let k = c.dim(1, 6);
        let pairs: Vec<(usize, usize)> = (0..k)
            .map(|_| (c.rng.gen_range(0..n1), c.rng.gen_range(0..n2)))
            .collect();
        move |g: &mut Graph<'_>, ids: &[ParamId]| {
            let (x, u, y) = (g.param(ids[0]), g.param(ids[1]), g.param(ids[2]));
            g.bilinear(x, u, y, &pairs)
        }
    });
}

#[test]
fn span_attend() {
    run("span_attend", |c| {
        let (l, w) = (c.dim(1, 5), c.dim(1, 3));
        c.matrix(l, w);
        c.input(&[l, 1], -2.0, 2.0);
        let spans = random_spans(c, l);
        move |g: &mut Graph<'_>, ids: &[ParamId]| {
            let (h, s) = (g.param(ids[0]), g.param(ids[1]));
            g.span_attend(h, s, &spans)
        }
    });
}

#[test]
fn span_mean() {
    run("span_mean", |c| {
        let (l, w) = (c.dim(1, 5), c.dim(1, 3));
        c.matrix(l, w);
        let spans = random_spans(c, l);
        move |g: &mut Graph<'_>, ids: &[ParamId]| {
            let h = g.param(ids[0]);
            g.span_mean(h, &spans)
        }
    });
}

#[test]
fn span_max() {
    run("span_max", |c| {
        let (l, w) = (c.dim(1, 5), c.dim(1, 3));
        // well-separated values so no max is within eps of a tie
        let id = c.matrix(l, w);
        let mut order: Vec<usize> = (0..l * w).collect();
        for k in (1..order.len()).rev() {
            order.swap(k, c.rng.gen_range(0..=k));
        }
        for (k, v) in c.store.value_mut(id).data_mut().iter_mut().enumerate() {
            *v = order[k] as f64 * 0.1 - 1.0;
        }
        let spans = random_spans(c, l);
        move |g: &mut Graph<'_>, ids: &[ParamId]| {
            let h = g.param(ids[0]);
            g.span_max(h, &spans)
        }
    });
}

#[test]
fn lstm_direction_both_ways() {
    run("lstm", |c| {
        let (l, e, d) = (c.dim(1, 4), c.dim(1, 3), c.dim(1, 2));
        c.input(&[l, e], -1.0, 1.0);
        let p = LstmParams {
            w_in: c.input(&[e, 4 * d], -1.0, 1.0),
            w_rec: c.input(&[d, 4 * d], -1.0, 1.0),
            bias: c.input(&[1, 4 * d], -0.5, 0.5),
        };
        let reverse = c.rng.gen_bool(0.5);
        move |g: &mut Graph<'_>, ids: &[ParamId]| {
            let x = g.param(ids[0]);
            lstm_direction(g, x, &p, reverse)
        }
    });
}

mod modules {
    use super::*;
    use regspan::agnostic::{boundary_scores, project_head_tail};
    use regspan::aware::span_regularity;
    use regspan::corpus::Vocab;
    use regspan::model::{Dropout, Model, ModelConfig};

    fn tiny(seed: u64) -> Model {
        let cfg = ModelConfig {
            embed_dim: 4,
            hidden: 2,
            layers: 1,
            mlp_dim: 3,
            ..ModelConfig::default()
        };
        let vocab = Vocab::from_lists(vec!['a', 'b'], vec!["X".into(), "Y".into()]);
        Model::new(cfg, vocab, seed).unwrap()
    }

    #[test]
    fn attention_pooling_on_a_two_char_span() {
        for seed in 0..10 {
            let m = tiny(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let rows: Vec<f64> = (0..8).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let h = Tensor::matrix(2, 4, rows).unwrap();
            let report = gradient_check(
                &m.params,
                |g| {
                    let h = g.constant(h.clone())?;
                    let v = span_regularity(g, h, 0, 1, &m.ids.aware)?;
                    weighted_sum(g, v)
                },
                EPS,
            )
            .unwrap();
            assert!(report.worst() < TOL, "{:?}", report.worst_param());
        }
    }

    #[test]
    fn boundary_score_alone() {
        for seed in 0..10 {
            let m = tiny(seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
            let rows: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let h = Tensor::matrix(3, 4, rows).unwrap();
            let spans = enumerate_spans(3, None);
            let report = gradient_check(
                &m.params,
                |g| {
                    let h = g.constant(h.clone())?;
                    let (head, tail) = project_head_tail(g, h, &m.ids.agnostic, 0.0, &mut Dropout::off())?;
                    let p = boundary_scores(g, head, tail, &m.ids.agnostic, &spans)?;
                    weighted_sum(g, p)
                },
                EPS,
            )
            .unwrap();
            assert!(report.worst() < TOL, "{:?}", report.worst_param());
        }
    }
}
