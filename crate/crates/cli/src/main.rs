//! `regspan`: data generation, training, evaluation and diagnostics for the
//! two-branch span recognizer.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use regspan::gradcheck::AuditDims;

use commands::Failure;

#[derive(Parser)]
#[command(name = "regspan", version, about = "Regularity-aware span-based NER")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigArgs {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Dotted-path override, e.g. `--set model.hidden=16`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write synthetic train/dev/test splits in the BMES column format.
    GenData {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train on `data.train`, selecting by F1 on `data.dev`.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        out: PathBuf,
    },
    /// Exact-match precision, recall and F1 of a checkpoint on a corpus.
    Eval {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Forbid nested predictions.
        #[arg(long)]
        flat: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write one JSON line of predicted entities per sentence.
    Predict {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Input is raw text, one sentence per line, instead of BMES.
        #[arg(long)]
        text: bool,
        #[arg(long)]
        flat: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the regularity attention weights of one span.
    Inspect {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        sentence: String,
        /// Inclusive character offsets `START,END`.
        #[arg(long, value_parser = parse_span)]
        span: (usize, usize),
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference audit of the full training objective.
    Gradcheck {
        /// Hidden size per LSTM direction.
        #[arg(long, default_value_t = 2)]
        d: usize,
        /// Sentence length.
        #[arg(long, default_value_t = 3)]
        l: usize,
        /// Embedding size.
        #[arg(long, default_value_t = 4)]
        e: usize,
        /// Classes including NONE.
        #[arg(long, default_value_t = 3)]
        c: usize,
        /// Agnostic projection size.
        #[arg(long, default_value_t = 3)]
        m: usize,
        #[arg(long, default_value_t = 2)]
        layers: usize,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        #[arg(long, default_value_t = 1e-4)]
        tol: f64,
    },
    /// Module ablation sweep over several seeds.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        #[arg(long, default_value_t = 5)]
        seeds: u64,
        /// Comma-separated subset of rows (default: all).
        #[arg(long)]
        rows: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_span(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or("expected START,END")?;
    let a = a.trim().parse().map_err(|e| format!("start: {e}"))?;
    let b = b.trim().parse().map_err(|e| format!("end: {e}"))?;
    Ok((a, b))
}

fn resolve(args: &ConfigArgs) -> Result<config::RunConfig, Failure> {
    config::resolve(args.config.as_deref(), &args.overrides).map_err(|e| Failure::Usage(e.0))
}

fn run(cli: Cli) -> commands::Outcome {
    match cli.command {
        Command::GenData { cfg, out } => commands::gen_data(&resolve(&cfg)?, &out),
        Command::Train { cfg, out } => commands::train_cmd(&resolve(&cfg)?, &out),
        Command::Eval {
            cfg,
            checkpoint,
            data,
            flat,
            out,
        } => commands::eval(&resolve(&cfg)?, &checkpoint, &data, flat, out.as_deref()),
        Command::Predict {
            cfg,
            checkpoint,
            data,
            text,
            flat,
            out,
        } => commands::predict(&resolve(&cfg)?, &checkpoint, &data, text, flat, &out),
        Command::Inspect {
            cfg,
            checkpoint,
            sentence,
            span,
            out,
        } => commands::inspect(&resolve(&cfg)?, &checkpoint, &sentence, span, out.as_deref()),
        Command::Gradcheck {
            d,
            l,
            e,
            c,
            m,
            layers,
            seeds,
            tol,
        } => commands::gradcheck(
            AuditDims {
                hidden: d,
                embed: e,
                classes: c,
                mlp: m,
                len: l,
                layers,
            },
            seeds,
            tol,
        ),
        Command::Ablate { cfg, seeds, rows, out } => commands::ablate(&resolve(&cfg)?, seeds, rows.as_deref(), &out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}
