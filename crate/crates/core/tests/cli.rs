use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn fairmc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fairmc"))
        .args(args)
        .env("RUST_LOG", "warn")
        .env_remove("FAIRMC_THREADS")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = fairmc(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const SMALL: &str = r#"{"n": 40, "m": 30, "r": 4, "p": [[0.5, 0.2], [0.2, 0.5]], "q": [[0.6, 0.3], [0.3, 0.6]]}"#;

fn small_dataset(dir: &Path) -> std::path::PathBuf {
    let cfg = dir.join("synth.json");
    std::fs::write(&cfg, SMALL).unwrap();
    let data = dir.join("small.fmds");
    ok(&["synth", "--config", s(&cfg), "--out", s(&data), "--seed", "4"]);
    data
}

fn json(bytes: &[u8]) -> Value {
    serde_json::from_slice(bytes).unwrap()
}

#[test]
fn synth_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let again = dir.path().join("again.fmds");
    let cfg = dir.path().join("synth.json");
    let out = ok(&["synth", "--config", s(&cfg), "--out", s(&again), "--seed", "4"]);
    assert_eq!(std::fs::read(&data).unwrap(), std::fs::read(&again).unwrap());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("realized rank: "), "{text}");
    assert!(text.contains("40x30"));
    let other = dir.path().join("other.fmds");
    ok(&["synth", "--config", s(&cfg), "--out", s(&other), "--seed", "5"]);
    assert_ne!(std::fs::read(&data).unwrap(), std::fs::read(&other).unwrap());
}

#[test]
fn synth_default_is_600_by_400() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("d.fmds");
    let text = String::from_utf8(ok(&["synth", "--out", s(&out)]).stdout).unwrap();
    assert!(text.contains("600x400"), "{text}");
    let (d, _) = fairmc::dataio::load_dataset(&out).unwrap();
    assert_eq!(d.dim(), (600, 400));
    assert_eq!(d.domain(), fairmc::types::ValueDomain::Binary);
}

#[test]
fn bad_configs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"p": [[1.5, 0.4], [0.4, 0.4]]}"#).unwrap();
    let out = fairmc(&["synth", "--config", s(&bad), "--out", s(&dir.path().join("x"))]);
    assert_eq!(code(&out), 2);
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
    std::fs::write(&bad, r#"{"n": 10, "colour": 1}"#).unwrap();
    assert_eq!(code(&fairmc(&["synth", "--config", s(&bad), "--out", s(&dir.path().join("x"))])), 2);
    assert_eq!(code(&fairmc(&["train", "--data", "missing.fmds", "--out-checkpoint", "x"])), 2);
    assert_eq!(code(&fairmc(&["train", "--lambda", "0.5"])), 2);
    assert_eq!(code(&fairmc(&[])), 2);
}

#[test]
fn train_then_eval_reproduces_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    for model in ["mf", "ae"] {
        let ckpt = dir.path().join(format!("{model}.ckpt"));
        let metrics = dir.path().join(format!("{model}.json"));
        ok(&[
            "train", "--data", s(&data), "--model", model, "--penalty", "dee", "--rank", "3", "--hidden", "8",
            "--iters", "40", "--seed", "11", "--topk", "5,10", "--out-checkpoint", s(&ckpt), "--metrics-out", s(&metrics),
        ]);
        let trained = json(&std::fs::read(&metrics).unwrap());
        let manifest = json(&std::fs::read(dir.path().join(format!("{model}.ckpt.json"))).unwrap());
        assert_eq!(manifest["penalty"]["tau"], 0.0);
        assert_eq!(manifest["penalty"]["lambda"], 0.99);
        let out = ok(&["eval", "--data", s(&data), "--checkpoint", s(&ckpt), "--topk", "5,10"]);
        assert_eq!(json(&out.stdout), trained, "{model}");
        assert!(trained.as_object().unwrap().keys().any(|k| k.starts_with("rate_u")));

        let plain = ok(&["eval", "--data", s(&data), "--checkpoint", s(&ckpt)]);
        let text = String::from_utf8(plain.stdout).unwrap();
        assert!(!text.contains("dee_ranking"), "{text}");

        let csv = ok(&["eval", "--data", s(&data), "--checkpoint", s(&ckpt), "--format", "csv"]);
        let csv = String::from_utf8(csv.stdout).unwrap();
        let mut lines = csv.lines();
        assert!(lines.next().unwrap().starts_with("rmse,dee,der"));
        assert_eq!(lines.count(), 1);
    }
}

#[test]
fn eval_rejects_mismatched_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let ckpt = dir.path().join("m.ckpt");
    ok(&["train", "--data", s(&data), "--rank", "2", "--iters", "3", "--out-checkpoint", s(&ckpt), "--metrics-out", s(&dir.path().join("m.json"))]);
    let big = dir.path().join("big.fmds");
    ok(&["synth", "--out", s(&big)]);
    assert_eq!(code(&fairmc(&["eval", "--data", s(&big), "--checkpoint", s(&ckpt)])), 2);
    assert_eq!(code(&fairmc(&["eval", "--data", s(&data), "--checkpoint", s(&data)])), 2);
}

#[test]
fn penalty_none_matches_lambda_zero() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let run = |extra: &[&str], name: &str| {
        let ckpt = dir.path().join(name);
        let mut args = vec!["train", "--data", s(&data), "--rank", "3", "--iters", "30", "--out-checkpoint", s(&ckpt)];
        args.extend_from_slice(extra);
        let metrics = ok(&args).stdout;
        (std::fs::read(&ckpt).unwrap(), metrics)
    };
    let none = run(&["--penalty", "none"], "none.ckpt");
    let zero = run(&["--penalty", "dee", "--lambda", "0"], "zero.ckpt");
    let cov = run(&["--penalty", "cov", "--lambda", "0"], "cov.ckpt");
    assert_eq!(none, zero);
    assert_eq!(none, cov);
}

#[test]
fn divergence_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let out = fairmc(&["train", "--data", s(&data), "--rank", "3", "--iters", "200", "--lr", "1e200", "--out-checkpoint", s(&dir.path().join("d.ckpt"))]);
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("diverged"));
}

#[test]
fn config_file_and_flag_precedence() {
    let dir = tempfile::tempdir().unwrap();
    let data = small_dataset(dir.path());
    let cfg = dir.path().join("train.json");
    std::fs::write(&cfg, r#"{"penalty": {"kind": "der", "lambda": 0.5, "tau": 0.25}, "train": {"iterations": 5, "rank": 2}}"#).unwrap();
    let ckpt = dir.path().join("c.ckpt");
    ok(&["train", "--data", s(&data), "--config", s(&cfg), "--lambda", "0.7", "--out-checkpoint", s(&ckpt)]);
    let m = json(&std::fs::read(dir.path().join("c.ckpt.json")).unwrap());
    assert_eq!(m["penalty"]["kind"], "der");
    assert_eq!(m["penalty"]["lambda"], 0.7);
    assert_eq!(m["penalty"]["tau"], 0.25);
    assert_eq!(m["train"]["iterations"], 5);
    assert_eq!(m["train"]["rank"], 2);
    std::fs::write(&cfg, r#"{"train": {"iters": 5}}"#).unwrap();
    assert_eq!(code(&fairmc(&["train", "--data", s(&data), "--config", s(&cfg), "--out-checkpoint", s(&ckpt)])), 2);
}

fn small_plan(dir: &Path) -> std::path::PathBuf {
    let plan = dir.join("plan.json");
    let body = format!(
        r#"{{"source": {{"kind": "synthetic", "n": 40, "m": 30, "r": 4, "p": [[0.5, 0.2], [0.2, 0.5]], "q": [[0.6, 0.3], [0.3, 0.6]]}},
            "penalties": [
              {{"label": "unfair", "penalty": {{"kind": "none", "tau": 0, "bandwidth": 0.01, "huber_delta": 0.01, "lambda": 0}}}},
              {{"label": "dee", "penalty": {{"kind": "dee", "tau": 0, "bandwidth": 0.01, "huber_delta": 0.01, "lambda": 0.99}}}}
            ],
            "seeds": [1, 2],
            "train": {{"iterations": 20, "rank": 3}},
            "topk": [5]}}"#
    );
    std::fs::write(&plan, body).unwrap();
    plan
}

#[test]
fn plan_outputs_use_metric_names() {
    let dir = tempfile::tempdir().unwrap();
    let plan = small_plan(dir.path());
    let out = dir.path().join("out");
    ok(&["plan", "--config", s(&plan), "--out", s(&out), "--threads", "2"]);
    let csv = std::fs::read_to_string(out.join("results.csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    assert_eq!(csv.lines().count(), 3);
    let results = json(&std::fs::read(out.join("results.json")).unwrap());
    let names: Vec<&String> = results["runs"][0]["metrics"].as_object().unwrap().keys().collect();
    assert!(names.iter().any(|n| *n == "dee_ranking_K5"));
    for name in names {
        assert!(header.contains(&format!("{name}_mean").as_str()), "{name} missing from {header:?}");
        assert!(header.contains(&format!("{name}_std").as_str()));
    }
    assert_eq!(results["runs"].as_array().unwrap().len(), 4);
    assert!(results["runs"][0]["config_hash"].as_str().unwrap().len() == 64);
    assert!(out.join("topk.csv").exists());

    let again = dir.path().join("again");
    ok(&["plan", "--config", s(&plan), "--out", s(&again), "--threads", "1"]);
    let strip = |v: Value| v["rows"].as_array().unwrap().iter().map(|r| r["metrics"].clone()).collect::<Vec<_>>();
    assert_eq!(strip(results), strip(json(&std::fs::read(again.join("results.json")).unwrap())));

    let single = dir.path().join("single");
    ok(&["plan", "--config", s(&plan), "--out", s(&single), "--seeds", "3"]);
    let r = json(&std::fs::read(single.join("results.json")).unwrap());
    assert_eq!(r["rows"][0]["metrics"]["dee"]["std"], 0.0);
}

#[test]
fn sweep_writes_grid_and_rejects_empty() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("sweep.json");
    std::fs::write(
        &cfg,
        r#"{"base": {"n": 40, "m": 30, "r": 4}, "axis": "p", "first": [0.4], "second": [0.1, 0.4], "seeds": [1], "train": {"iterations": 10, "rank": 3}}"#,
    )
    .unwrap();
    let out = dir.path().join("sweep");
    ok(&["sweep", "--config", s(&cfg), "--out", s(&out)]);
    let csv = std::fs::read_to_string(out.join("sweep.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.starts_with("p0,p1,dee_mean"));
    std::fs::write(&cfg, r#"{"base": {}, "axis": "q", "first": [], "second": [0.1]}"#).unwrap();
    assert_eq!(code(&fairmc(&["sweep", "--config", s(&cfg), "--out", s(&out)])), 2);
}

#[test]
fn bench_reports_seconds() {
    let dir = tempfile::tempdir().unwrap();
    let plan = small_plan(dir.path());
    let out = fairmc(&["bench", "--config", s(&plan), "--seeds", "1"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("label,penalty,seeds,train_seconds_mean"));
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn synthetic_defaults_with_dee_are_fair() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("d.fmds");
    ok(&["synth", "--out", s(&data)]);
    let out = ok(&["train", "--data", s(&data), "--penalty", "dee", "--seed", "1", "--out-checkpoint", s(&dir.path().join("m.ckpt"))]);
    let m = json(&out.stdout);
    assert!(m["dee"].as_f64().unwrap() <= 0.01, "{m}");
}
