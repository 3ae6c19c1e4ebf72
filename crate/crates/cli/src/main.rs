mod compare;
mod opts;

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use mrc_adv::checkpoint::Checkpoint;
use mrc_adv::data::{self, content_hash, gen_choice_task, gen_kv_task, inject_distractor, Dataset, Example, TaskParams};
use mrc_adv::train::{evaluate, train, EvalMetrics, EvalSets, MetricsWriter};
use mrc_adv::{Error, Result};
use serde::Serialize;
use serde_json::json;

use opts::ConfigArgs;

/// Seed for distractor injection in `eval --distractor` and `compare`.
pub const DISTRACTOR_SEED: u64 = 7;

#[derive(Parser)]
#[command(name = "mrc-adv", version, about = "Adversarial training for toy reading comprehension")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Task {
    Span,
    Choice,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a synthetic dataset plus its metadata file.
    Gen {
        #[arg(value_enum)]
        task: Task,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long, default_value_t = 4)]
        n_pairs: usize,
        /// Options per choice example.
        #[arg(long, default_value_t = 4)]
        m: usize,
        #[arg(long, default_value_t = 60)]
        vocab_size: usize,
        #[arg(long, default_value_t = 2)]
        class_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and write `metrics.jsonl` and `checkpoint.json`.
    Train {
        #[arg(long)]
        data: PathBuf,
        /// Held-out set, evaluated clean and with distractors after every epoch.
        #[arg(long)]
        eval_data: Option<PathBuf>,
        #[arg(long)]
        out_dir: PathBuf,
        /// Fill `wall_ms` in the metrics file.
        #[arg(long)]
        wall_clock: bool,
        #[command(flatten)]
        config: ConfigArgs,
    },
    /// Evaluate a checkpoint and print its metrics as JSON.
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Inject one near-miss distractor pair into every passage first.
        #[arg(long)]
        distractor: bool,
        /// Also write the metrics here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train every mode for every seed and summarize clean and distractor scores.
    Compare {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        eval_data: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3")]
        seeds: Vec<u64>,
        #[arg(long, value_delimiter = ',', default_value = "baseline,at,pqat")]
        modes: Vec<String>,
        #[command(flatten)]
        config: ConfigArgs,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cmd: Cmd) -> Result<()> {
    match cmd {
        Cmd::Gen {
            task,
            n,
            n_pairs,
            m,
            vocab_size,
            class_size,
            seed,
            out,
        } => {
            let ds = match task {
                Task::Span => gen_kv_task(&TaskParams::span(n, n_pairs, vocab_size, seed).with_class_size(class_size)),
                Task::Choice => gen_choice_task(&TaskParams::choice(n, n_pairs, m, vocab_size, seed).with_class_size(class_size)),
            }
            .map_err(into_config)?;
            data::save(&ds, &out)?;
            info!("wrote {} examples to {}", ds.examples.len(), out.display());
            Ok(())
        }
        Cmd::Train {
            data,
            eval_data,
            out_dir,
            wall_clock,
            config,
        } => {
            let config = config.resolve(None)?;
            let train_set = data::load(&data)?;
            let held_out = eval_data.as_deref().map(load_held_out).transpose()?;
            check_vocab(&train_set, held_out.as_ref().map(|h| &h.0))?;
            mkdir(&out_dir)?;
            let metrics = out_dir.join("metrics.jsonl");
            let mut writer = MetricsWriter::append(&metrics)?;
            writer.write(&json!({ "header": {
                "config": config,
                "seed": config.seed,
                "mode": config.mode(),
                "dataset": data,
                "dataset_sha256": content_hash(&data)?,
                "eval_dataset": eval_data,
                "eval_dataset_sha256": eval_data.as_deref().map(content_hash).transpose()?,
            }}))?;
            let evals = held_out
                .as_ref()
                .map(|(ds, dis)| EvalSets {
                    clean: Some(&ds.examples),
                    distractor: Some(dis),
                })
                .unwrap_or_default();
            info!("training {} (seed {}) on {}", config.mode(), config.seed, data.display());
            let trained = match train(&train_set, &config, evals, wall_clock, &mut |r| writer.write(r)) {
                Ok(t) => t,
                Err(e) => {
                    writer.write(&json!({ "error": e.to_string() }))?;
                    return Err(e);
                }
            };
            let ck = Checkpoint::new(&train_set.vocab, &trained.emb.table, &trained.model)?;
            ck.save(&out_dir.join("checkpoint.json"))?;
            if let Some(m) = trained.clean {
                info!("clean {}", summary_line(&m));
            }
            if let Some(m) = trained.distractor {
                info!("distractor {}", summary_line(&m));
            }
            Ok(())
        }
        Cmd::Eval {
            checkpoint,
            data,
            distractor,
            out,
        } => {
            let ck = Checkpoint::load(&checkpoint)?;
            let ds = data::load(&data)?;
            if ck.vocab()? != ds.vocab {
                return Err(Error::Config(format!(
                    "checkpoint vocabulary ({} tokens) does not match dataset vocabulary ({} tokens)",
                    ck.vocab.len(),
                    ds.vocab.len()
                )));
            }
            let examples = if distractor {
                with_distractors(&ds)?
            } else {
                ds.examples.clone()
            };
            let m = evaluate(&ck.model, &ck.table, &examples)?;
            let text = serde_json::to_string(&EvalReport {
                data: &data,
                distractor,
                metrics: &m,
            })
            .expect("metrics serialize");
            println!("{text}");
            if let Some(out) = out {
                std::fs::write(&out, text + "\n").map_err(|e| Error::io(&out, e))?;
            }
            Ok(())
        }
        Cmd::Compare {
            data,
            eval_data,
            out_dir,
            seeds,
            modes,
            config,
        } => compare::run(&data, &eval_data, &out_dir, &seeds, &modes, &config),
    }
}

#[derive(Serialize)]
struct EvalReport<'a> {
    data: &'a Path,
    distractor: bool,
    #[serde(flatten)]
    metrics: &'a EvalMetrics,
}

fn into_config(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

fn mkdir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn with_distractors(ds: &Dataset) -> Result<Vec<Example>> {
    ds.examples
        .iter()
        .map(|e| inject_distractor(e, &ds.vocab, DISTRACTOR_SEED))
        .collect()
}

/// A held-out set and its distractor copy.
fn load_held_out(path: &Path) -> Result<(Dataset, Vec<Example>)> {
    let ds = data::load(path)?;
    let dis = with_distractors(&ds)?;
    Ok((ds, dis))
}

fn check_vocab(train_set: &Dataset, held_out: Option<&Dataset>) -> Result<()> {
    match held_out {
        Some(h) if h.vocab != train_set.vocab => Err(Error::Config(format!(
            "eval_data vocabulary ({} tokens) differs from data vocabulary ({} tokens)",
            h.vocab.len(),
            train_set.vocab.len()
        ))),
        _ => Ok(()),
    }
}

fn summary_line(m: &EvalMetrics) -> String {
    match (m.em, m.f1, m.acc) {
        (Some(em), Some(f1), _) => format!("em {em:.4} f1 {f1:.4} (n {})", m.n),
        (_, _, Some(acc)) => format!("acc {acc:.4} (n {})", m.n),
        _ => format!("n {}", m.n),
    }
}
