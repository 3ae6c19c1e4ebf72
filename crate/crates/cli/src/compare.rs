use std::path::Path;

use log::{info, warn};
use mrc_adv::data::{self, content_hash};
use mrc_adv::train::{train, EvalSets, Mode, ModeSummary, MetricsWriter, RunResult, Summary};
use mrc_adv::{Error, Result};
use serde_json::json;

use crate::opts::ConfigArgs;
use crate::{check_vocab, load_held_out, mkdir};

pub fn run(
    data_path: &Path,
    eval_path: &Path,
    out_dir: &Path,
    seeds: &[u64],
    modes: &[String],
    args: &ConfigArgs,
) -> Result<()> {
    if seeds.len() < 2 {
        return Err(Error::Config(format!("seeds: need at least 2, got {}", seeds.len())));
    }
    let modes: Vec<Mode> = modes.iter().map(|m| m.parse()).collect::<Result<_>>()?;
    // validate every configuration before any training starts
    let configs = modes
        .iter()
        .map(|&m| {
            let mut c = args.resolve(Some(m))?;
            if m == Mode::Baseline {
                c.k = 1;
            }
            Ok(c)
        })
        .collect::<Result<Vec<_>>>()?;

    let train_set = data::load(data_path)?;
    let (held_out, distractor) = load_held_out(eval_path)?;
    check_vocab(&train_set, Some(&held_out))?;
    let hashes = (content_hash(data_path)?, content_hash(eval_path)?);
    mkdir(out_dir)?;

    let mut summaries = Vec::new();
    for (mode, base) in modes.iter().zip(&configs) {
        let mut runs = Vec::new();
        for &seed in seeds {
            let mut config = base.clone();
            config.seed = seed;
            let path = out_dir.join(format!("{mode}-seed{seed}.jsonl"));
            if path.exists() {
                std::fs::remove_file(&path).map_err(|e| Error::io(&path, e))?;
            }
            let mut writer = MetricsWriter::append(&path)?;
            writer.write(&json!({ "header": {
                "config": config,
                "seed": seed,
                "mode": mode,
                "dataset": data_path,
                "dataset_sha256": hashes.0,
                "eval_dataset": eval_path,
                "eval_dataset_sha256": hashes.1,
            }}))?;
            info!("{mode} seed {seed}");
            let evals = EvalSets {
                clean: Some(&held_out.examples),
                distractor: Some(&distractor),
            };
            let result = match train(&train_set, &config, evals, false, &mut |r| writer.write(r)) {
                Ok(t) => RunResult {
                    seed,
                    clean: t.clean,
                    distractor: t.distractor,
                    error: None,
                },
                Err(e) => {
                    warn!("{mode} seed {seed} failed: {e}");
                    writer.write(&json!({ "error": e.to_string() }))?;
                    RunResult {
                        seed,
                        clean: None,
                        distractor: None,
                        error: Some(e.to_string()),
                    }
                }
            };
            runs.push(result);
        }
        summaries.push(ModeSummary::new(*mode, runs));
    }

    let summary = Summary::new(seeds.to_vec(), summaries);
    summary.save(&out_dir.join("summary.json"))?;
    print!("{}", summary.table());
    println!("{}", summary.to_json());
    if summary.partial {
        return Err(Error::Data("some runs failed; summary holds partial results".into()));
    }
    Ok(())
}
