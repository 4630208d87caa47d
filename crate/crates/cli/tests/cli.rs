use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

use serde_json::Value;

fn kit(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_halva-kit"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = kit(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn jsonl(path: &Path) -> Vec<Value> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect()
}

#[test]
fn gen_world_line_count_and_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let stdout = ok(d, &["gen-world", "--n", "1000", "--out", "a.jsonl", "--seed", "4"]);
    assert!(stdout.contains("1000") && stdout.contains("seed 4"), "{stdout}");
    let a = std::fs::read(d.join("a.jsonl")).unwrap();
    assert_eq!(a.iter().filter(|&&b| b == b'\n').count(), 1000);

    ok(d, &["gen-world", "--n", "1000", "--out", "b.jsonl", "--seed", "4"]);
    assert_eq!(a, std::fs::read(d.join("b.jsonl")).unwrap());
    ok(d, &["gen-world", "--n", "1000", "--out", "c.jsonl", "--seed", "5"]);
    assert_ne!(a, std::fs::read(d.join("c.jsonl")).unwrap());

    let zero = kit(d, &["gen-world", "--n", "0", "--out", "z.jsonl"]);
    assert!(!zero.status.success());
    assert!(!d.join("z.jsonl").exists());

    let bad = kit(d, &["gen-world", "--n", "5", "--out", "missing/dir/s.jsonl"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stderr).contains("missing/dir"));
}

#[test]
fn augment_counts_follow_the_mix() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-world", "--n", "1000", "--out", "s.jsonl", "--lexicon-out", "lex.json"]);
    let stdout = ok(
        d,
        &["augment", "--scenes", "s.jsonl", "--lexicon", "lex.json", "--out-train", "t.jsonl", "--out-ref", "r.jsonl"],
    );
    assert!(stdout.contains("(100.0%)"), "{stdout}");
    let mut counts: BTreeMap<String, i64> = BTreeMap::new();
    for r in jsonl(&d.join("t.jsonl")) {
        *counts.entry(r["task"].as_str().unwrap().to_string()).or_default() += 1;
    }
    let expected = [("one_sentence", 0.025), ("short", 0.54), ("detailed", 0.38), ("yesno", 0.07)];
    for (task, p) in expected {
        let want = p * 1000.0;
        let got = counts.get(task).copied().unwrap_or(0) as f64;
        assert!((got - want).abs() <= 1.0, "{task}: {got} vs {want}");
    }
    assert_eq!(jsonl(&d.join("r.jsonl")).len(), 1000);

    ok(
        d,
        &[
            "augment", "--scenes", "s.jsonl", "--lexicon", "lex.json", "--mix", "short=0.25,yesno=0.1", "--out-train", "m.jsonl",
            "--out-ref", "r2.jsonl",
        ],
    );
    let tasks: Vec<String> = jsonl(&d.join("m.jsonl")).iter().map(|r| r["task"].as_str().unwrap().to_string()).collect();
    assert_eq!(tasks.iter().filter(|t| *t == "short").count(), 250);
    assert_eq!(tasks.iter().filter(|t| *t == "yesno").count(), 100);
    assert_eq!(tasks.len(), 350);
}

#[test]
fn augment_rejects_a_lexicon_that_does_not_cover_the_scenes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(d, &["gen-world", "--n", "50", "--out", "s.jsonl", "--lexicon-out", "lex.json"]);
    let scenes = jsonl(&d.join("s.jsonl"));
    let victim = scenes[0]["objects"][0].as_str().unwrap().to_string();
    let mut lex: Value = serde_json::from_str(&std::fs::read_to_string(d.join("lex.json")).unwrap()).unwrap();
    lex["concepts"].as_array_mut().unwrap().retain(|c| c["name"] != victim.as_str());
    lex.as_object_mut().unwrap().remove("cooccur");
    std::fs::write(d.join("bad.json"), lex.to_string()).unwrap();

    let out = kit(
        d,
        &["augment", "--scenes", "s.jsonl", "--lexicon", "bad.json", "--out-train", "t.jsonl", "--out-ref", "r.jsonl"],
    );
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    let first_id = scenes[0]["id"].as_str().unwrap();
    assert!(stderr.contains(first_id), "{stderr}");
    assert!(!d.join("t.jsonl").exists());
}

struct Server(std::process::Child);

impl Drop for Server {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

#[test]
fn augment_through_the_mock_endpoint_keeps_the_schema() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut child = Command::new(env!("CARGO_BIN_EXE_halva-kit"))
        .args(["mock-llm", "--addr", "127.0.0.1:0"])
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut url = String::new();
    BufReader::new(child.stdout.take().unwrap()).read_line(&mut url).unwrap();
    let _server = Server(child);
    let url = url.trim();
    assert!(url.starts_with("http://127.0.0.1:"), "{url}");

    ok(d, &["gen-world", "--n", "120", "--out", "s.jsonl", "--lexicon-out", "lex.json"]);
    let base = ["augment", "--scenes", "s.jsonl", "--lexicon", "lex.json", "--out-ref", "r.jsonl"];
    ok(d, &[&base[..], &["--out-train", "local.jsonl"]].concat());
    let stdout = ok(d, &[&base[..], &["--out-train", "llm.jsonl", "--llm-endpoint", url]].concat());
    assert!(stdout.contains("(100.0%)"), "{stdout}");

    let keys = |v: &Value| -> BTreeSet<String> { v.as_object().unwrap().keys().cloned().collect() };
    let pair_keys = |v: &Value| -> BTreeSet<String> { v["pairs"][0].as_object().unwrap().keys().cloned().collect() };
    let local = jsonl(&d.join("local.jsonl"));
    let remote = jsonl(&d.join("llm.jsonl"));
    assert_eq!(local.len(), remote.len());
    for (a, b) in local.iter().zip(&remote) {
        assert_eq!(keys(a), keys(b));
        assert_eq!(pair_keys(a), pair_keys(b));
        assert_eq!(a["id"], b["id"]);
    }
    // a literal rewriter reproduces the local substitutions
    assert_eq!(local, remote);

    let down = kit(d, &[&base[..], &["--out-train", "x.jsonl", "--llm-endpoint", "http://127.0.0.1:9/rewrite"]].concat());
    assert!(!down.status.success());
    assert!(String::from_utf8_lossy(&down.stderr).contains("unavailable"));
}

#[test]
fn gradcheck_reports_every_loss_below_tolerance() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let stdout = ok(d, &["gradcheck", "--seed", "11", "--out", "gc.json"]);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines.len(), 4, "{stdout}");
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(d.join("gc.json")).unwrap()).unwrap();
    for entry in summary["max_rel_error"].as_array().unwrap() {
        assert!(entry[1].as_f64().unwrap() < 1e-4, "{entry}");
    }
}

#[test]
fn config_errors_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(d.join("c.json"), r#"{"finetune": {"steps": 3, "momentun": 0.5}}"#).unwrap();
    let out = kit(d, &["gen-world", "--config", "c.json", "--n", "3", "--out", "s.jsonl"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("finetune.momentun"));
    let out = kit(d, &["gen-world", "--set", "world.max_objects=0", "--n", "3", "--out", "s.jsonl"]);
    assert!(!out.status.success());
}

#[test]
fn small_pipeline_runs_end_to_end_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    std::fs::write(
        d.join("run.json"),
        r#"{"seed": 3, "model": {"d": 8, "h": 16, "k": 2}, "pretrain": {"steps": 300}, "finetune": {"steps": 40, "batch": 16}}"#,
    )
    .unwrap();
    let cfg = ["--config", "run.json"];
    let run = |args: &[&str]| ok(d, &[args, &cfg[..]].concat());
    run(&["gen-world", "--n", "300", "--out", "pre.jsonl", "--lexicon-out", "lex.json"]);
    run(&["gen-world", "--n", "80", "--split", "finetune", "--out", "ft.jsonl"]);
    run(&["gen-world", "--n", "30", "--split", "test", "--out", "test.jsonl"]);
    run(&["augment", "--scenes", "ft.jsonl", "--lexicon", "lex.json", "--out-train", "train.jsonl", "--out-ref", "ref.jsonl"]);
    run(&["pretrain", "--scenes", "pre.jsonl", "--lexicon", "lex.json", "--out", "base.json", "--out-corpus", "corpus.jsonl"]);
    assert!(d.join("base.vocab").exists());
    let ft = ["finetune", "--model", "base.json", "--train", "train.jsonl", "--reference", "corpus.jsonl"];
    let stdout = run(&[&ft[..], &["--out", "dpa.json", "--trace", "trace.csv"]].concat());
    assert!(stdout.starts_with("dpa finetune, 40 steps"), "{stdout}");
    run(&[&ft[..], &["--out", "dpa2.json"]].concat());
    assert_eq!(std::fs::read(d.join("dpa.json")).unwrap(), std::fs::read(d.join("dpa2.json")).unwrap());
    let dpo = run(&[&ft[..], &["--out", "dpo.json", "--loss", "dpo", "--beta", "0.5"]].concat());
    assert!(dpo.starts_with("dpo finetune"), "{dpo}");

    let trace = std::fs::read_to_string(d.join("trace.csv")).unwrap();
    assert_eq!(trace.lines().count(), 41);

    run(&["eval", "--model", "dpa.json", "--scenes", "test.jsonl", "--lexicon", "lex.json", "--out", "report.json"]);
    let report: Value = serde_json::from_str(&std::fs::read_to_string(d.join("report.json")).unwrap()).unwrap();
    for key in ["chair_i", "chair_s", "coverage", "f1", "yes_bias", "config", "seed"] {
        assert!(report.get(key).is_some(), "missing {key}");
    }
    assert_eq!(report["seed"], 3);
    assert_eq!(report["n"], 30);

    run(&[
        "sweep-alpha", "--model", "base.json", "--train", "train.jsonl", "--reference", "corpus.jsonl", "--scenes", "test.jsonl",
        "--lexicon", "lex.json", "--alphas", "0.1,1", "--steps", "10", "--out", "sweep.csv",
    ]);
    let sweep = std::fs::read_to_string(d.join("sweep.csv")).unwrap();
    assert_eq!(sweep.lines().count(), 3);

    let missing = kit(d, &["eval", "--model", "nope.json", "--scenes", "test.jsonl", "--lexicon", "lex.json", "--out", "x.json"]);
    assert!(!missing.status.success());
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.json"));
}
