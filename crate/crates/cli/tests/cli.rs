use std::path::Path;
use std::process::{Command, Output};

use mrc_adv::train::{read_records, Mode, Summary};
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_mrc-adv"));
    c.env("RUST_LOG", "warn");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn gen_span(dir: &Path, name: &str, n: usize, seed: u64) -> std::path::PathBuf {
    let path = dir.join(name);
    ok(&["gen", "span", "--n", &n.to_string(), "--seed", &seed.to_string(), "--out", p(&path)]);
    path
}

const SMALL: &[&str] = &["--dim", "8", "--epochs", "1", "--batch-size", "16"];

#[test]
fn gen_is_deterministic_and_sized() {
    let dir = TempDir::new().unwrap();
    let a = gen_span(dir.path(), "a.jsonl", 100, 7);
    let b = gen_span(dir.path(), "b.jsonl", 100, 7);
    let (ta, tb) = (std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert_eq!(ta, tb);
    assert_eq!(String::from_utf8(ta).unwrap().lines().count(), 100);
    assert!(dir.path().join("a.meta.json").exists());
}

#[test]
fn gen_choice_has_m_options() {
    let dir = TempDir::new().unwrap();
    let path = dir.path().join("c.jsonl");
    ok(&["gen", "choice", "--n", "50", "--m", "4", "--out", p(&path)]);
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 50);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        assert_eq!(v["options"].as_array().unwrap().len(), 4);
    }
}

#[test]
fn modes_are_recorded_from_eps_flags() {
    let dir = TempDir::new().unwrap();
    let data = gen_span(dir.path(), "d.jsonl", 40, 1);
    let cases: [(&[&str], Mode); 3] = [
        (&["--eps-delta", "0", "--eps-p", "0.02", "--eps-q", "0.02"], Mode::Pqat),
        (&["--eps-delta", "0.01", "--eps-p", "0", "--eps-q", "0"], Mode::At),
        (&["--eps-delta", "0", "--eps-p", "0", "--eps-q", "0"], Mode::Baseline),
    ];
    for (i, (flags, mode)) in cases.iter().enumerate() {
        let out = dir.path().join(format!("run{i}"));
        let mut args = vec!["train", "--data", p(&data), "--out-dir", p(&out)];
        args.extend_from_slice(flags);
        args.extend_from_slice(SMALL);
        ok(&args);
        let records = read_records(&out.join("metrics.jsonl")).unwrap();
        assert_eq!(records.len(), 3);
        assert!(records.iter().all(|r| r.mode == *mode));
        let text = std::fs::read_to_string(out.join("metrics.jsonl")).unwrap();
        let header: serde_json::Value = serde_json::from_str(text.lines().next().unwrap()).unwrap();
        assert_eq!(header["header"]["mode"], mode.as_str());
        assert_eq!(header["header"]["dataset_sha256"].as_str().unwrap().len(), 64);
        assert!(out.join("checkpoint.json").exists());
    }
}

#[test]
fn bad_flags_exit_with_config_code() {
    let dir = TempDir::new().unwrap();
    let data = gen_span(dir.path(), "d.jsonl", 10, 1);
    let out = dir.path().join("o");
    let cases: [&[&str]; 4] = [
        &["--k", "0"],
        &["--eps-p", "-1"],
        &["--mode", "fast"],
        &["--alpha", "0.1"],
    ];
    for flags in cases {
        let mut args = vec!["train", "--data", p(&data), "--out-dir", p(&out)];
        args.extend_from_slice(flags);
        let res = run(&args);
        assert_eq!(res.status.code(), Some(2), "{flags:?}");
    }
    assert!(!out.exists());
    assert_eq!(run(&["train", "--bogus"]).status.code(), Some(2));
}

#[test]
fn eval_is_repeatable_and_checks_vocab() {
    let dir = TempDir::new().unwrap();
    let data = gen_span(dir.path(), "d.jsonl", 40, 1);
    let out = dir.path().join("run");
    let mut args = vec!["train", "--data", p(&data), "--out-dir", p(&out)];
    args.extend_from_slice(SMALL);
    ok(&args);
    let ck = out.join("checkpoint.json");
    let e = |extra: &[&str]| {
        let mut args = vec!["eval", "--checkpoint", p(&ck), "--data", p(&data)];
        args.extend_from_slice(extra);
        ok(&args).stdout
    };
    assert_eq!(e(&[]), e(&[]));
    let dis: serde_json::Value = serde_json::from_slice(&e(&["--distractor"])).unwrap();
    assert_eq!(dis["distractor"], true);
    assert!(dis["em"].as_f64().is_some());

    let other = dir.path().join("other.jsonl");
    ok(&["gen", "span", "--n", "5", "--vocab-size", "80", "--out", p(&other)]);
    let res = run(&["eval", "--checkpoint", p(&ck), "--data", p(&other)]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn compare_same_seed_has_zero_std_and_round_trips() {
    let dir = TempDir::new().unwrap();
    let data = gen_span(dir.path(), "train.jsonl", 40, 1);
    let test = gen_span(dir.path(), "test.jsonl", 20, 2);
    let out = dir.path().join("cmp");
    let mut args = vec![
        "compare",
        "--data",
        p(&data),
        "--eval-data",
        p(&test),
        "--out-dir",
        p(&out),
        "--seeds",
        "1,1",
        "--modes",
        "pqat",
    ];
    args.extend_from_slice(SMALL);
    let res = ok(&args);
    let stdout = String::from_utf8(res.stdout).unwrap();
    assert!(stdout.starts_with("mode"));

    let summary = Summary::load(&out.join("summary.json")).unwrap();
    assert!(!summary.partial);
    let m = summary.mode(Mode::Pqat).unwrap();
    assert_eq!(m.runs.len(), 2);
    assert_eq!(m.clean.em.unwrap().std, 0.0);
    assert_eq!(m.distractor.f1.unwrap().std, 0.0);
    let again: Summary = serde_json::from_str(&summary.to_json()).unwrap();
    assert_eq!(again, summary);
}

#[test]
fn compare_needs_two_seeds() {
    let dir = TempDir::new().unwrap();
    let data = gen_span(dir.path(), "d.jsonl", 10, 1);
    let res = run(&[
        "compare",
        "--data",
        p(&data),
        "--eval-data",
        p(&data),
        "--out-dir",
        p(&dir.path().join("o")),
        "--seeds",
        "3",
    ]);
    assert_eq!(res.status.code(), Some(2));
}

#[test]
fn train_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let data = gen_span(dir.path(), "d.jsonl", 40, 1);
    let files: Vec<Vec<u8>> = ["a", "b"]
        .iter()
        .map(|name| {
            let out = dir.path().join(name);
            let mut args = vec!["train", "--data", p(&data), "--out-dir", p(&out), "--mode", "both", "--seed", "5"];
            args.extend_from_slice(SMALL);
            ok(&args);
            std::fs::read(out.join("metrics.jsonl")).unwrap()
        })
        .collect();
    assert_eq!(files[0], files[1]);
}
