use regspan::checkpoint;
use regspan::corpus::{Sentence, Vocab};
use regspan::decode::{evaluate_model, OverlapMode};
use regspan::exec::Execution;
use regspan::model::{Model, ModelConfig};
use regspan::params::Gradients;
use regspan::synth::{generate_synthetic, SplitCounts, SynthConfig, SynthCorpora};
use regspan::train::{adam_step, batch_gradients, probe_loss, train, EpochRecord, OptimizerState, TrainConfig, TrainObserver};
use regspan::Error;

fn corpora(train: usize) -> SynthCorpora {
    let cfg = SynthConfig {
        counts: SplitCounts {
            train,
            dev: 10,
            test: 10,
        },
        ..SynthConfig::default()
    };
    generate_synthetic(&cfg, 3).unwrap()
}

fn small_model(c: &SynthCorpora, seed: u64) -> Model {
    let cfg = ModelConfig {
        embed_dim: 6,
        hidden: 3,
        layers: 2,
        mlp_dim: 4,
        max_span_len: Some(6),
        ..ModelConfig::default()
    };
    let vocab = Vocab::build(&c.train).unwrap().with_types(SynthConfig::default().types);
    Model::new(cfg, vocab, seed).unwrap()
}

#[test]
fn single_batch_loss_decreases_for_ten_steps() {
    let c = corpora(4);
    for seed in 0..5 {
        let mut model = small_model(&c, seed);
        let cfg = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let batch: Vec<&Sentence> = c.train.iter().collect();
        let mut state = OptimizerState::new(&model.params);
        let mut losses = Vec::new();
        for _ in 0..=10 {
            let (loss, mut grads) = batch_gradients(&model, &batch, &cfg, None).unwrap();
            losses.push(loss.total);
            adam_step(&mut model.params, &mut state, &mut grads, &cfg).unwrap();
        }
        for w in losses.windows(2) {
            assert!(w[1] < w[0], "seed {seed}: {losses:?}");
        }
    }
}

#[test]
fn batch_gradients_identical_across_execution_modes() {
    let c = corpora(6);
    let model = small_model(&c, 1);
    let batch: Vec<&Sentence> = c.train.iter().collect();
    let seeds: Vec<[u8; 32]> = (0..batch.len() as u8).map(|k| [k; 32]).collect();
    let run = |execution| {
        let cfg = TrainConfig {
            execution,
            negative_keep_rate: 0.5,
            ..TrainConfig::default()
        };
        batch_gradients(&model, &batch, &cfg, Some(&seeds)).unwrap()
    };
    let (la, ga) = run(Execution::Sequential);
    let (lb, gb) = run(Execution::Parallel);
    assert_eq!(la.total.to_bits(), lb.total.to_bits());
    for ((_, a), (_, b)) in ga.iter().zip(gb.iter()) {
        assert_eq!(
            a.iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
            b.iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        );
    }
    let zero = Gradients::zeros_like(&model.params);
    assert!(ga.global_norm() > zero.global_norm());
}

fn quick_cfg(seed: u64) -> TrainConfig {
    TrainConfig {
        epochs: 2,
        batch_size: 4,
        lr: 1e-2,
        seed,
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_bitwise_reproducible() {
    let c = corpora(16);
    let a = train(small_model(&c, 0), &c.train, &c.dev, &quick_cfg(5), &mut ()).unwrap();
    let b = train(small_model(&c, 0), &c.train, &c.dev, &quick_cfg(5), &mut ()).unwrap();
    assert_eq!(serde_json::to_string(&a.log).unwrap(), serde_json::to_string(&b.log).unwrap());
    for ((_, p), (_, q)) in a.last.params.iter().zip(b.last.params.iter()) {
        let bits = |t: &regspan::tensor::Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&p.value), bits(&q.value), "{}", p.name);
    }
    let c2 = train(small_model(&c, 0), &c.train, &c.dev, &quick_cfg(6), &mut ()).unwrap();
    assert_ne!(a.log, c2.log);
}

#[test]
fn log_records_every_component() {
    let c = corpora(8);
    let out = train(small_model(&c, 0), &c.train, &c.dev, &quick_cfg(1), &mut ()).unwrap();
    assert_eq!(out.log.len(), 2);
    for r in &out.log {
        assert!(r.loss_aware > 0.0 && r.loss_agnostic.is_some() && r.loss_orth.is_some());
        assert!(r.dev_f1.is_some());
    }
    let aware_only = TrainConfig {
        lambda_agnostic: 0.0,
        lambda_orth: 0.0,
        ..quick_cfg(1)
    };
    let out = train(small_model(&c, 0), &c.train, &[], &aware_only, &mut ()).unwrap();
    assert!(out.log.iter().all(|r| r.loss_agnostic.is_none() && r.dev_f1.is_none()));
    assert_eq!(out.best_epoch, 2);
}

#[test]
fn checkpoint_round_trip_preserves_probe_loss_and_dev_f1() {
    let c = corpora(12);
    let cfg = quick_cfg(2);
    let out = train(small_model(&c, 4), &c.train, &c.dev, &cfg, &mut ()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    checkpoint::save(dir.path(), &out.best, Some(&cfg)).unwrap();
    let (loaded, saved_cfg) = checkpoint::load(dir.path()).unwrap();
    assert_eq!(saved_cfg.as_ref(), Some(&cfg));
    let a = probe_loss(&out.best, &c.dev, &cfg).unwrap();
    let b = probe_loss(&loaded, &c.dev, &cfg).unwrap();
    assert!((a.total - b.total).abs() <= 1e-12);
    let fa = evaluate_model(&out.best, &c.dev, OverlapMode::Nested, Execution::Sequential).unwrap();
    let fb = evaluate_model(&loaded, &c.dev, OverlapMode::Nested, Execution::Sequential).unwrap();
    assert_eq!(fa, fb);
}

struct Epochs(Vec<usize>);

impl TrainObserver for Epochs {
    fn on_epoch(&mut self, record: &EpochRecord, _: &Model, _: bool) -> regspan::Result<()> {
        self.0.push(record.epoch);
        Ok(())
    }
}

#[test]
fn non_finite_weights_abort_as_divergence() {
    let c = corpora(8);
    let mut model = small_model(&c, 0);
    let id = model.ids.aware.w_type;
    model.params.value_mut(id).data_mut()[0] = f64::NAN;
    let mut seen = Epochs(Vec::new());
    let err = train(model, &c.train, &c.dev, &quick_cfg(0), &mut seen).unwrap_err();
    assert!(matches!(err, Error::Diverged { epoch: 1, .. }), "{err}");
    assert!(seen.0.is_empty());
}
