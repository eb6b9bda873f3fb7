use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};
use std::sync::OnceLock;

use serde_json::{json, Value};
use tempfile::TempDir;
use xaln::format::TensorFile;
use xaln::tags::WordTable;

fn xaln(args: &[&str]) -> Output {
    xaln_env(args, None)
}

fn xaln_env(args: &[&str], seed: Option<&str>) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_xaln"));
    cmd.args(args).env_remove("XALN_SEED");
    if let Some(s) = seed {
        cmd.env("XALN_SEED", s);
    }
    cmd.output().expect("binary runs")
}

fn ok(out: Output) -> Value {
    assert!(out.status.success(), "failed: {}", String::from_utf8_lossy(&out.stderr));
    serde_json::from_slice(&out.stdout).expect("one JSON summary on stdout")
}

fn err(out: Output) -> (i32, Value) {
    assert!(!out.status.success(), "unexpected success: {}", String::from_utf8_lossy(&out.stdout));
    let text = String::from_utf8_lossy(&out.stderr);
    let line = text.lines().last().expect("an error line");
    (out.status.code().unwrap(), serde_json::from_str(line).expect("a JSON error"))
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_config(dir: &Path, name: &str, value: Value) -> PathBuf {
    let path = dir.join(name);
    fs::write(&path, serde_json::to_vec(&value).unwrap()).unwrap();
    path
}

fn train_section(epochs: usize) -> Value {
    json!({ "variant": "w2v-16-1h", "epochs": epochs, "batch_size": 4, "validation_fraction": 0.25 })
}

fn files_under(dir: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

/// A synthetic dataset with prepared patches, word vectors and a one-epoch
/// checkpoint, shared by the tests that only read it.
struct Fixture {
    _dir: TempDir,
    data: PathBuf,
    manifest: PathBuf,
    prepared: PathBuf,
    w2v: PathBuf,
    checkpoint: PathBuf,
}

impl Fixture {
    fn first_record(&self) -> Value {
        let text = fs::read_to_string(&self.manifest).unwrap();
        serde_json::from_str(text.lines().next().unwrap()).unwrap()
    }
}

fn fixture() -> &'static Fixture {
    static F: OnceLock<Fixture> = OnceLock::new();
    F.get_or_init(|| {
        let dir = tempfile::tempdir().unwrap();
        let root = dir.path().to_path_buf();
        let f = Fixture {
            data: root.join("data"),
            manifest: root.join("data/manifest.jsonl"),
            prepared: root.join("prepared"),
            w2v: root.join("w2v/w2v.xt"),
            checkpoint: root.join("run/final.ckpt"),
            _dir: dir,
        };
        ok(xaln(&["synth", "--out", s(&f.data), "--clips-per-class", "4", "--seed", "3"]));
        ok(xaln(&["prepare-data", "--manifest", s(&f.manifest), "--out", s(&f.prepared)]));
        ok(xaln(&["train-w2v", "--manifest", s(&f.manifest), "--dim", "16", "--out", s(&root.join("w2v"))]));
        let cfg = write_config(&root, "run.json", json!({ "train": train_section(1) }));
        ok(xaln(&["train", "--config", s(&cfg), "--data", s(&f.prepared), "--w2v", s(&f.w2v), "--out", s(&root.join("run"))]));
        f
    })
}

#[test]
fn prepare_data_writes_one_patch_per_clip_reproducibly() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let text = fs::read_to_string(&f.manifest).unwrap();
    let three: String = text.lines().take(3).map(|l| format!("{l}\n")).collect();
    let manifest = f.data.join("three.jsonl");
    fs::write(&manifest, three).unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let summary = ok(xaln(&["prepare-data", "--manifest", s(&manifest), "--out", s(&a)]));
    assert_eq!(summary["clips"], 3);
    ok(xaln(&["prepare-data", "--manifest", s(&manifest), "--out", s(&b)]));
    let files = files_under(&a);
    let names: Vec<_> = files.iter().map(|(p, _)| p.to_str().unwrap().to_owned()).collect();
    assert_eq!(names, ["patches/000000.xt", "patches/000001.xt", "patches/000002.xt", "stats.xt"]);
    assert_eq!(files, files_under(&b));
}

#[test]
fn prepare_data_names_the_clip_with_missing_audio() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = tmp.path().join("m.jsonl");
    fs::write(&manifest, "{\"id\":\"ghost\",\"audio_path\":\"nowhere.wav\",\"tags\":[\"a\"]}\n").unwrap();
    let (code, e) = err(xaln(&["prepare-data", "--manifest", s(&manifest), "--out", s(&tmp.path().join("o"))]));
    assert_eq!(code, 1);
    assert_eq!(e["clip"], "ghost");
    assert_eq!(e["error"], "io");
}

#[test]
fn train_w2v_writes_one_row_per_tag_and_honours_the_seed() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: Option<&str>| {
        let out = tmp.path().join(name);
        let summary = ok(xaln_env(&["train-w2v", "--manifest", s(&f.manifest), "--dim", "128", "--out", s(&out)], seed));
        (summary, fs::read(out.join("w2v.xt")).unwrap())
    };
    let (summary, a) = run("a", None);
    let (_, b) = run("b", None);
    let (overridden, c) = run("c", Some("7"));
    assert_eq!(a, b);
    assert_ne!(a, c);
    assert_eq!(overridden["seed"], 7);
    let (table, vocab, _) = WordTable::from_file(&TensorFile::read(&tmp.path().join("a/w2v.xt")).unwrap()).unwrap();
    assert_eq!(table.dim(), 128);
    assert_eq!(vocab.len(), summary["vocabulary"].as_u64().unwrap() as usize);
    assert!(vocab.len() > 1);
}

#[test]
fn train_w2v_rejects_an_empty_manifest() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest = tmp.path().join("empty.jsonl");
    fs::write(&manifest, "").unwrap();
    let (code, e) = err(xaln(&["train-w2v", "--manifest", s(&manifest), "--dim", "8", "--out", s(tmp.path())]));
    assert_eq!(code, 1);
    assert!(!e["message"].as_str().unwrap().is_empty());
    assert!(!tmp.path().join("w2v.xt").exists());
}

#[test]
fn train_rejects_word_vectors_of_the_wrong_width() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", json!({ "train": { "variant": "w2v-128-1h" } }));
    let out = xaln(&["train", "--config", s(&cfg), "--data", s(&f.prepared), "--w2v", s(&f.w2v), "--out", s(tmp.path())]);
    let (code, e) = err(out);
    assert_eq!((code, e["error"].as_str()), (1, Some("config_mismatch")));
    assert!(!tmp.path().join("final.ckpt").exists());
}

#[test]
fn unknown_config_keys_are_rejected() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let mut section = train_section(1);
    section["momentum"] = json!(0.9);
    let cfg = write_config(tmp.path(), "c.json", json!({ "train": section }));
    let out = xaln(&["train", "--config", s(&cfg), "--data", s(&f.prepared), "--w2v", s(&f.w2v), "--out", s(tmp.path())]);
    let (code, e) = err(out);
    assert_eq!((code, e["error"].as_str()), (1, Some("invalid_input")));
    assert!(e["message"].as_str().unwrap().contains("momentum"));
}

#[test]
fn training_logs_every_epoch_and_resumes_exactly() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let one = write_config(tmp.path(), "one.json", json!({ "train": train_section(1) }));
    let two = write_config(tmp.path(), "two.json", json!({ "train": train_section(2) }));
    let train = |cfg: &Path, out: &str, resume: Option<&Path>| {
        let out = tmp.path().join(out);
        let mut args = vec!["train", "--config", s(cfg), "--data", s(&f.prepared), "--w2v", s(&f.w2v), "--out", s(&out)];
        if let Some(r) = resume {
            args.extend(["--resume", s(r)]);
        }
        let summary = ok(xaln(&args));
        (summary, out)
    };
    let (summary, full) = train(&two, "full", None);
    assert_eq!(summary["pairs"], 16);
    assert_eq!(summary["epoch"], 2);
    let metrics = fs::read_to_string(full.join("metrics.jsonl")).unwrap();
    let lines: Vec<Value> = metrics.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    let epochs = |split: &str| lines.iter().filter(|l| l["split"] == split).map(|l| l["epoch"].as_u64().unwrap()).collect::<Vec<_>>();
    assert_eq!(epochs("train"), [0, 1]);
    assert_eq!(epochs("validation").len(), 2);
    assert!(lines.iter().all(|l| l["loss_total"].as_f64().is_some_and(f64::is_finite)));

    let (_, half) = train(&one, "half", None);
    let (_, resumed) = train(&two, "resumed", Some(&half.join("final.ckpt")));
    assert_eq!(fs::read(full.join("final.ckpt")).unwrap(), fs::read(resumed.join("final.ckpt")).unwrap());
}

#[test]
fn gradcheck_failure_names_the_worst_op() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "c.json", json!({ "train": train_section(1) }));
    let (code, e) = err(xaln(&["gradcheck", "--config", s(&cfg), "--tolerance", "0", "--per-tensor", "1"]));
    assert_eq!((code, e["error"].as_str()), (1, Some("check_failed")));
    assert!(e["message"].as_str().unwrap().contains("worst op `"));
}

#[test]
fn mfcc_probe_writes_ten_repeats() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let summary = ok(xaln(&["probe", "--task-manifest", s(&f.manifest), "--mfcc", "--out", s(tmp.path())]));
    assert_eq!(summary["repeats"], 10);
    let results: Value = serde_json::from_slice(&fs::read(tmp.path().join("results.json")).unwrap()).unwrap();
    assert_eq!(results["task"], "manifest");
    assert_eq!(results["features"], "mfcc");
    let runs = results["per_run_accuracies"].as_array().unwrap();
    assert_eq!(runs.len(), 10);
    let mean = runs.iter().map(|v| v.as_f64().unwrap()).sum::<f64>() / 10.0;
    assert!((results["mean"].as_f64().unwrap() - mean).abs() < 1e-12);
}

#[test]
fn encoder_probe_records_the_variant() {
    let f = fixture();
    let tmp = tempfile::tempdir().unwrap();
    let cfg = write_config(tmp.path(), "p.json", json!({ "probe": { "repeats": 2, "epochs": 5 } }));
    let args = ["probe", "--task-manifest", s(&f.manifest), "--checkpoint", s(&f.checkpoint), "--config", s(&cfg), "--out", s(tmp.path())];
    let summary = ok(xaln(&args));
    assert_eq!(summary["variant"], "w2v-16-1h");
    assert_eq!(summary["repeats"], 2);
}

#[test]
fn probe_needs_a_feature_source() {
    let f = fixture();
    let (code, e) = err(xaln(&["probe", "--task-manifest", s(&f.manifest), "--out", "/tmp/unused"]));
    assert_eq!((code, e["error"].as_str()), (2, Some("usage")));
}

#[test]
fn retrieval_returns_the_whole_corpus_when_k_exceeds_it() {
    let f = fixture();
    let tag = f.first_record()["tags"][0].as_str().unwrap().to_owned();
    let args = ["retrieve", "--checkpoint", s(&f.checkpoint), "--data", s(&f.prepared), "--query-tags", &tag, "--k", "1000"];
    let summary = ok(xaln(&args));
    let hits = summary["hits"].as_array().unwrap();
    assert_eq!(hits.len(), 16);
    let scores: Vec<f64> = hits.iter().map(|h| h["score"].as_f64().unwrap()).collect();
    assert!(scores.windows(2).all(|w| w[0] >= w[1]));
}

#[test]
fn retrieval_names_unknown_tags() {
    let f = fixture();
    let args = ["retrieve", "--checkpoint", s(&f.checkpoint), "--data", s(&f.prepared), "--query-tags", "zzzqqq"];
    let (code, e) = err(xaln(&args));
    assert_eq!((code, e["error"].as_str(), e["token"].as_str()), (1, Some("out_of_vocabulary"), Some("zzzqqq")));
}

#[test]
fn audio_queries_rank_tagged_clips() {
    let f = fixture();
    let audio = f.data.join(f.first_record()["audio_path"].as_str().unwrap());
    let args = ["retrieve", "--checkpoint", s(&f.checkpoint), "--data", s(&f.prepared), "--query-audio", s(&audio), "--k", "3"];
    let summary = ok(xaln(&args));
    assert_eq!(summary["hits"].as_array().unwrap().len(), 3);
    assert_eq!(summary["corpus"], 16);
}

#[test]
fn zero_k_is_a_usage_error() {
    let f = fixture();
    let args = ["retrieve", "--checkpoint", s(&f.checkpoint), "--data", s(&f.prepared), "--query-tags", "x", "--k", "0"];
    assert_eq!(err(xaln(&args)).0, 2);
}
