use std::collections::BTreeSet;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use regspan::checkpoint;
use regspan::corpus::{parse_column_corpus, write_column_corpus, Sentence, Vocab};
use regspan::decode::{evaluate_model, inspect_regularity, predict_corpus, OverlapMode, PredictionRecord};
use regspan::encoder::load_pretrained;
use regspan::experiment::{run_ablation, AblationRow, ABLATION_ROWS};
use regspan::gradcheck::{audit_model, AuditDims};
use regspan::model::Model;
use regspan::synth::{generate_synthetic, SynthCorpora};
use regspan::train::{train, EpochRecord, TrainConfig, TrainObserver};
use regspan::Error;

use crate::config::RunConfig;

/// Exit status 1 for usage/config problems, 2 for everything else.
#[derive(Debug)]
pub enum Failure {
    Usage(String),
    Runtime(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::Config(msg) => Failure::Usage(msg),
            other => Failure::Runtime(other),
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

impl From<serde_json::Error> for Failure {
    fn from(e: serde_json::Error) -> Self {
        Failure::Runtime(e.into())
    }
}

pub type Outcome = Result<(), Failure>;

pub const RESOLVED_CONFIG: &str = "config.resolved.json";

fn echo_config(dir: &Path, cfg: &RunConfig) -> Outcome {
    fs::create_dir_all(dir)?;
    fs::write(dir.join(RESOLVED_CONFIG), serde_json::to_string_pretty(cfg)? + "\n")?;
    Ok(())
}

fn read_corpus(path: &Path) -> Result<Vec<Sentence>, Failure> {
    let text = fs::read_to_string(path)
        .map_err(|e| Failure::Runtime(Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display())))))?;
    parse_column_corpus(&text).map_err(|e| match e {
        Error::Parse { line, msg } => Failure::Runtime(Error::Parse {
            line,
            msg: format!("{}: {msg}", path.display()),
        }),
        other => other.into(),
    })
}

fn required<'a>(p: &'a Option<PathBuf>, key: &str) -> Result<&'a Path, Failure> {
    p.as_deref()
        .ok_or_else(|| Failure::Usage(format!("{key} is required for this command")))
}

pub fn gen_data(cfg: &RunConfig, out: &Path) -> Outcome {
    let corpora = generate_synthetic(&cfg.synth, cfg.data_seed)?;
    echo_config(out, cfg)?;
    for (name, split) in [("train", &corpora.train), ("dev", &corpora.dev), ("test", &corpora.test)] {
        fs::write(out.join(format!("{name}.bmes")), write_column_corpus(split)?)?;
    }
    println!(
        "{}",
        serde_json::json!({
            "train": corpora.train.len(),
            "dev": corpora.dev.len(),
            "test": corpora.test.len(),
            "out": out,
        })
    );
    Ok(())
}

struct RunFiles {
    log: BufWriter<File>,
    checkpoint: PathBuf,
    train: TrainConfig,
}

impl TrainObserver for RunFiles {
    fn on_epoch(&mut self, record: &EpochRecord, model: &Model, best: bool) -> regspan::Result<()> {
        writeln!(self.log, "{}", serde_json::to_string(record)?)?;
        self.log.flush()?;
        if best {
            checkpoint::save(&self.checkpoint, model, Some(&self.train))?;
        }
        Ok(())
    }
}

pub const LOG_FILE: &str = "train_log.jsonl";
pub const CHECKPOINT_DIR: &str = "checkpoint";

pub fn train_cmd(cfg: &RunConfig, out: &Path) -> Outcome {
    let train_set = read_corpus(required(&cfg.data.train, "data.train")?)?;
    let dev_set = match &cfg.data.dev {
        Some(p) => read_corpus(p)?,
        None => Vec::new(),
    };
    let types: BTreeSet<String> = train_set
        .iter()
        .chain(&dev_set)
        .flat_map(|s| s.entities.iter().map(|e| e.kind.clone()))
        .collect();
    let vocab = Vocab::build(&train_set)?.with_types(types);
    let mut model = Model::new(cfg.model.clone(), vocab, cfg.train.seed)?;
    if let Some(p) = &cfg.data.embeddings {
        let text = fs::read_to_string(p)?;
        let n = load_pretrained(&text, &model.vocab, &mut model.params, model.ids.encoder.embedding)?;
        log::info!("loaded {n} pretrained character vectors");
    }
    echo_config(out, cfg)?;
    let mut files = RunFiles {
        log: BufWriter::new(File::create(out.join(LOG_FILE))?),
        checkpoint: out.join(CHECKPOINT_DIR),
        train: cfg.train.clone(),
    };
    let outcome = train(model, &train_set, &dev_set, &cfg.train, &mut files)?;
    println!(
        "{}",
        serde_json::json!({
            "best_epoch": outcome.best_epoch,
            "best_dev": outcome.best_dev,
            "checkpoint": out.join(CHECKPOINT_DIR),
        })
    );
    Ok(())
}

fn overlap(cfg: &RunConfig, flat: bool) -> OverlapMode {
    if flat {
        OverlapMode::Flat
    } else {
        cfg.train.overlap
    }
}

pub fn eval(cfg: &RunConfig, ckpt: &Path, data: &Path, flat: bool, out: Option<&Path>) -> Outcome {
    let (model, _) = checkpoint::load(ckpt)?;
    let sentences = read_corpus(data)?;
    let report = evaluate_model(&model, &sentences, overlap(cfg, flat), cfg.train.execution)?;
    let text = serde_json::to_string_pretty(&report)?;
    if let Some(dir) = out {
        echo_config(dir, cfg)?;
        fs::write(dir.join("eval.json"), text.clone() + "\n")?;
    }
    println!("{text}");
    Ok(())
}

pub fn predict(cfg: &RunConfig, ckpt: &Path, data: &Path, plain_text: bool, flat: bool, out: &Path) -> Outcome {
    let (model, _) = checkpoint::load(ckpt)?;
    let sentences = if plain_text {
        fs::read_to_string(data)?
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty())
            .map(Sentence::from_text)
            .collect()
    } else {
        read_corpus(data)?
    };
    let preds = predict_corpus(&model, &sentences, overlap(cfg, flat), cfg.train.execution)?;
    echo_config(out, cfg)?;
    let mut w = BufWriter::new(File::create(out.join("predictions.jsonl"))?);
    for (s, p) in sentences.iter().zip(&preds) {
        writeln!(w, "{}", serde_json::to_string(&PredictionRecord::new(s, p, &model.vocab))?)?;
    }
    w.flush()?;
    Ok(())
}

pub fn inspect(cfg: &RunConfig, ckpt: &Path, sentence: &str, span: (usize, usize), out: Option<&Path>) -> Outcome {
    let (model, _) = checkpoint::load(ckpt)?;
    let s = Sentence::from_text(sentence);
    let alphas = inspect_regularity(&model, &s, span)?;
    let mut table = String::from("pos\tchar\talpha\n");
    for (k, a) in alphas.iter().enumerate() {
        table.push_str(&format!("{}\t{}\t{:.4}\n", span.0 + k, s.chars[span.0 + k], a));
    }
    if let Some(dir) = out {
        echo_config(dir, cfg)?;
        fs::write(dir.join("inspect.tsv"), &table)?;
    }
    print!("{table}");
    Ok(())
}

pub fn gradcheck(dims: AuditDims, seeds: u64, tol: f64) -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..seeds {
        let report = audit_model(dims, seed)?;
        let w = report.worst_param();
        println!(
            "seed {seed}: worst relative error {:.3e} ({})",
            report.worst(),
            w.map_or("-", |p| p.name.as_str())
        );
        worst = worst.max(report.worst());
    }
    println!("worst relative error {worst:.3e}");
    if worst < tol {
        Ok(())
    } else {
        Err(Failure::Runtime(Error::Numeric {
            op: format!("gradient audit: {worst:.3e} >= {tol:.1e}"),
        }))
    }
}

pub fn ablate(cfg: &RunConfig, seeds: u64, rows: Option<&str>, out: &Path) -> Outcome {
    let rows: Vec<AblationRow> = match rows {
        None => ABLATION_ROWS.to_vec(),
        Some(list) => list
            .split(',')
            .map(|n| {
                AblationRow::by_name(n.trim()).ok_or_else(|| {
                    let known: Vec<&str> = ABLATION_ROWS.iter().map(|r| r.name).collect();
                    Failure::Usage(format!("unknown ablation row {n:?}; known: {}", known.join(", ")))
                })
            })
            .collect::<Result<_, _>>()?,
    };
    let corpora = match (&cfg.data.train, &cfg.data.dev, &cfg.data.test) {
        (Some(tr), Some(dv), Some(te)) => SynthCorpora {
            train: read_corpus(tr)?,
            dev: read_corpus(dv)?,
            test: read_corpus(te)?,
        },
        (None, None, None) => generate_synthetic(&cfg.synth, cfg.data_seed)?,
        _ => return Err(Failure::Usage("data.train, data.dev and data.test must be given together".into())),
    };
    let types: BTreeSet<String> = corpora
        .train
        .iter()
        .chain(&corpora.dev)
        .flat_map(|s| s.entities.iter().map(|e| e.kind.clone()))
        .collect();
    let vocab = Vocab::build(&corpora.train)?.with_types(types);
    echo_config(out, cfg)?;
    let seeds: Vec<u64> = (0..seeds).collect();
    let report = run_ablation(&corpora, &vocab, &cfg.synth, &cfg.model, &cfg.train, &rows, &seeds)?;
    let table = report.table();
    fs::write(out.join("ablation.json"), serde_json::to_string_pretty(&report)? + "\n")?;
    fs::write(out.join("table.txt"), &table)?;
    print!("{table}");
    Ok(())
}
