use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

const MODEL: &str = r#"
model_id = "tiny"
layers = 4
hidden_dim = 16
heads = 2
vocab = 256
mlp_kind = "swiglu"
seed = 3

[[spike_taps]]
layer = 1
dim = 4
token_index = 0
gain = 1e5
"#;

fn actscope(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_actscope"))
        .args(args)
        .env_remove("ACTSCOPE_THREADS")
        .output()
        .expect("spawn actscope")
}

fn ok(args: &[&str]) -> String {
    let out = actscope(args);
    assert!(
        out.status.success(),
        "actscope {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

struct Fixture {
    dir: TempDir,
    model: PathBuf,
    corpus: PathBuf,
}

impl Fixture {
    fn new() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let model = dir.path().join("tiny.toml");
        fs::write(&model, MODEL).unwrap();
        let corpus = dir.path().join("corpus.jsonl");
        ok(&["corpus", "--total", "40", "--max-len", "12", "--out", p(&corpus)]);
        Fixture { dir, model, corpus }
    }

    fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    fn profile(&self, out: &str, extra: &[&str]) -> PathBuf {
        let out = self.path(out);
        let mut args = vec!["profile", "--model", p(&self.model), "--corpus", p(&self.corpus), "--out", p(&out)];
        args.extend_from_slice(extra);
        ok(&args);
        out
    }
}

fn json(path: &Path) -> Value {
    serde_json::from_slice(&fs::read(path).unwrap()).unwrap()
}

#[test]
fn empty_corpus_is_fine() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("c.jsonl");
    ok(&["corpus", "--total", "0", "--out", p(&out)]);
    assert_eq!(fs::read_to_string(out).unwrap(), "");
}

#[test]
fn corpus_to_stdout_has_one_line_per_sample() {
    let stdout = ok(&["corpus", "--total", "25", "--max-len", "4"]);
    assert_eq!(stdout.lines().count(), 25);
}

#[test]
fn missing_manifest_is_an_input_error() {
    let out = actscope(&["corpus", "--total", "10", "--manifest", "/nonexistent/manifest.tsv"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("manifest"), "{}", stderr(&out));
}

#[test]
fn zero_threads_rejected() {
    let out = actscope(&["--threads", "0", "corpus", "--total", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn profile_is_reproducible_across_runs_and_thread_counts() {
    let f = Fixture::new();
    let a = f.profile("a", &["--threads", "1"]);
    let b = f.profile("b", &["--threads", "3"]);
    assert_eq!(fs::read(a.join("stats.json")).unwrap(), fs::read(b.join("stats.json")).unwrap());
    assert_eq!(fs::read(a.join("card.json")).unwrap(), fs::read(b.join("card.json")).unwrap());
    let card = json(&a.join("card.json"));
    assert_eq!(card["carrier"]["component"], "hidden_state");
    assert_eq!(card["criterion"]["passes"], true);
}

#[test]
fn exported_stream_ingests_to_the_same_card() {
    let f = Fixture::new();
    let records = f.path("records.jsonl");
    let direct = f.profile("direct", &["--export", p(&records)]);
    let replay = f.path("replay");
    ok(&["ingest", "--records", p(&records), "--out", p(&replay)]);
    assert_eq!(fs::read(direct.join("card.json")).unwrap(), fs::read(replay.join("card.json")).unwrap());
}

#[test]
fn binary_stream_ingests() {
    let f = Fixture::new();
    let records = f.path("records.bin");
    f.profile("direct", &["--export", p(&records), "--encoding", "binary-f32"]);
    let replay = f.path("replay");
    ok(&["ingest", "--records", p(&records), "--out", p(&replay)]);
    assert_eq!(json(&replay.join("card.json"))["carrier"]["component"], "hidden_state");
}

#[test]
fn empty_stream_reports_no_records() {
    let dir = tempfile::tempdir().unwrap();
    for (name, body) in [("empty", ""), ("header", "{\"actscope_records\":1,\"encoding\":\"json\"}\n")] {
        let path = dir.path().join(name);
        fs::write(&path, body).unwrap();
        let out = actscope(&["ingest", "--records", p(&path), "--out", p(dir.path())]);
        assert_eq!(out.status.code(), Some(2), "{name}");
        assert!(stderr(&out).contains("no records"), "{name}: {}", stderr(&out));
    }
}

#[test]
fn malformed_line_is_named() {
    let f = Fixture::new();
    let records = f.path("records.jsonl");
    f.profile("direct", &["--export", p(&records)]);
    let mut text: Vec<String> = fs::read_to_string(&records).unwrap().lines().take(4).map(String::from).collect();
    text.push("{\"model_id\": nope".into());
    fs::write(&records, text.join("\n") + "\n").unwrap();
    let out = actscope(&["ingest", "--records", p(&records), "--out", p(&f.path("x"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("line 5"), "{}", stderr(&out));
}

#[test]
fn tap_filter_restricts_the_carrier() {
    let f = Fixture::new();
    let out = f.profile("mlp", &["--taps", "mlp_output"]);
    let card = json(&out.join("card.json"));
    assert_eq!(card["carrier"]["component"], "mlp_output");
    assert!(card["criterion"].is_null());
    let stats = json(&out.join("stats.json"));
    assert!(stats["cells"]
        .as_array()
        .unwrap()
        .iter()
        .all(|c| c["component"] == "mlp_output"));
}

#[test]
fn unknown_tap_is_rejected() {
    let f = Fixture::new();
    let out = actscope(&[
        "profile",
        "--model",
        p(&f.model),
        "--corpus",
        p(&f.corpus),
        "--out",
        p(&f.path("o")),
        "--taps",
        "router",
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn quantprobe_reports_each_strategy() {
    let f = Fixture::new();
    let stats = f.profile("prof", &[]).join("stats.json");
    let out = f.path("probe");
    ok(&[
        "quantprobe",
        "--model",
        p(&f.model),
        "--corpus",
        p(&f.corpus),
        "--stats",
        p(&stats),
        "--calib",
        "10",
        "--eval",
        "20",
        "--out",
        p(&out),
    ]);
    let probe = json(&out.join("probe.json"));
    assert_eq!(probe["results"].as_array().unwrap().len(), 2);
    assert_eq!(probe["layer"], json(&stats)["card"]["peak_layer"]);
    assert_eq!(fs::read_to_string(out.join("probe.csv")).unwrap().lines().count(), 3);
}

#[test]
fn quantprobe_needs_enough_samples() {
    let f = Fixture::new();
    let out = actscope(&[
        "quantprobe",
        "--model",
        p(&f.model),
        "--corpus",
        p(&f.corpus),
        "--layer",
        "2",
        "--calib",
        "30",
        "--eval",
        "30",
        "--out",
        p(&f.path("probe")),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn stability_writes_one_row_per_size() {
    let f = Fixture::new();
    let out = f.path("stab");
    ok(&[
        "stability",
        "--model",
        p(&f.model),
        "--corpus",
        p(&f.corpus),
        "--sizes",
        "10,20",
        "--repeats",
        "3",
        "--out",
        p(&out),
    ]);
    let report = json(&out.join("stability.json"));
    assert_eq!(report["runs"].as_array().unwrap().len(), 6);
    assert_eq!(fs::read_to_string(out.join("stability.csv")).unwrap().lines().count(), 3);
}

#[test]
fn report_prints_tiers_and_pairs() {
    let f = Fixture::new();
    let spiked = f.profile("spiked", &[]).join("stats.json");
    let flat_model = f.path("flat.toml");
    fs::write(&flat_model, MODEL.replace("model_id = \"tiny\"", "model_id = \"flat\"").replace("gain = 1e5", "gain = 0.0")).unwrap();
    let flat = f.path("flat");
    ok(&["profile", "--model", p(&flat_model), "--corpus", p(&f.corpus), "--out", p(&flat)]);

    let out = f.path("report");
    let stdout = ok(&[
        "report",
        p(&spiked),
        p(&flat.join("card.json")),
        "--pairs",
        "flat:tiny",
        "--tiers",
        "--out",
        p(&out),
    ]);
    assert!(stdout.contains("tier 4 [1e5, inf): 1"), "{stdout}");
    assert!(stdout.contains("flat vs tiny"), "{stdout}");
    for name in ["report.json", "tiers.csv", "trajectory.csv", "heatmap.csv", "scatter.csv", "pairs.csv", "cells.csv"] {
        assert!(out.join(name).exists(), "{name}");
    }
    let report = json(&out.join("report.json"));
    assert_eq!(report["matched_pairs"][0]["lower"], "flat");
}

#[test]
fn report_rejects_unknown_pair() {
    let f = Fixture::new();
    let card = f.profile("a", &[]).join("card.json");
    let out = actscope(&["report", p(&card), "--pairs", "tiny:ghost", "--out", p(&f.path("r"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("ghost"));
}
