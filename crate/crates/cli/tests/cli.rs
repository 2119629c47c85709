use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use molalign_core::merge::{lerp_merge, load_checkpoint, slerp_merge};

fn molalign(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_molalign")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = molalign(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
}

fn fails_with(args: &[&str], code: i32) -> String {
    let out = molalign(args);
    let stderr = String::from_utf8_lossy(&out.stderr).to_string();
    assert_eq!(out.status.code(), Some(code), "{args:?}: {stderr}");
    stderr
}

fn p(dir: &Path, name: &str) -> String {
    dir.join(name).to_str().unwrap().to_string()
}

const TINY: [&str; 8] = ["--d-model", "8", "--heads", "1", "--context", "600", "--batch-size", "4"];

fn tiny_sft(data: &str, out: &str, seed: &str) {
    let mut args = vec!["train", "--method", "sft", "--data", data, "--out", out, "--seed", seed];
    args.extend(TINY);
    ok(&args);
}

/// A 12-pair corpus and a tiny SFT checkpoint trained on it.
fn setup(dir: &Path) -> (String, String) {
    let pairs = p(dir, "pairs.jsonl");
    ok(&["gen-data", "--n", "12", "--seed", "3", "--out", &pairs]);
    let ckpt = p(dir, "sft.ckpt");
    tiny_sft(&pairs, &ckpt, "1");
    (pairs, ckpt)
}

fn read_json(path: &str) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn gen_data_is_reproducible_and_has_a_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (p(dir.path(), "a.jsonl"), p(dir.path(), "b.jsonl"));
    ok(&["gen-data", "--n", "10", "--seed", "5", "--out", &a]);
    ok(&["gen-data", "--n", "10", "--seed", "5", "--out", &b]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    assert_eq!(fs::read_to_string(&a).unwrap().lines().count(), 10);
    let m = read_json(&format!("{a}.manifest.json"));
    assert_eq!(m["command"], "gen-data");
    assert_eq!(m["config"]["seed"], 5);
    assert!(m["wall_clock_secs"].as_f64().unwrap() >= 0.0);
}

#[test]
fn seed_is_mandatory() {
    let dir = tempfile::tempdir().unwrap();
    fails_with(&["gen-data", "--n", "10", "--out", &p(dir.path(), "a.jsonl")], 2);
}

#[test]
fn config_file_fills_in_and_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = p(dir.path(), "run.cfg");
    fs::write(&cfg, "# toy corpus\nn = 5\nseed = 3\n").unwrap();
    let out = p(dir.path(), "a.jsonl");
    ok(&["gen-data", "--config", &cfg, "--n", "7", "--out", &out]);
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 7);
    ok(&["gen-data", "--config", &cfg, "--out", &out]);
    assert_eq!(fs::read_to_string(&out).unwrap().lines().count(), 5);
    fs::write(&cfg, "bogus_knob = 1\n").unwrap();
    fails_with(&["gen-data", "--config", &cfg, "--seed", "1", "--out", &out], 2);
}

#[test]
fn split_writes_three_parts() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = p(dir.path(), "pairs.jsonl");
    ok(&["gen-data", "--n", "20", "--seed", "3", "--out", &pairs]);
    let out = p(dir.path(), "split");
    ok(&["split", "--data", &pairs, "--seed", "1", "--out-dir", &out]);
    let count = |n: &str| fs::read_to_string(Path::new(&out).join(n)).unwrap().lines().count();
    assert_eq!((count("train.jsonl"), count("val.jsonl"), count("test.jsonl")), (16, 2, 2));
    let m = read_json(&format!("{out}/split.manifest.json"));
    assert_eq!(m["inputs"].as_object().unwrap().len(), 1);
    fails_with(&["split", "--data", &pairs, "--seed", "1", "--fractions", "0.5", "0.5", "0.5", "--out-dir", &out], 2);
}

#[test]
fn build_triples_with_kto_examples() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = p(dir.path(), "pairs.jsonl");
    ok(&["gen-data", "--n", "6", "--seed", "3", "--out", &pairs]);
    let (t, k) = (p(dir.path(), "t.jsonl"), p(dir.path(), "k.jsonl"));
    ok(&["build-triples", "--data", &pairs, "--seed", "2", "--out", &t, "--kto-out", &k]);
    let triples: Vec<serde_json::Value> =
        fs::read_to_string(&t).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(triples.len(), 6);
    assert!(triples.iter().all(|x| x["preferred"] != x["dispreferred"]));
    assert_eq!(fs::read_to_string(&k).unwrap().lines().count(), 12);
    fails_with(&["build-triples", "--data", &pairs, "--out", &t], 2);
    fails_with(&["build-triples", "--data", &pairs, "--seed", "1", "--strength", "0", "--out", &t], 2);
}

#[test]
fn training_is_byte_reproducible_and_logged() {
    let dir = tempfile::tempdir().unwrap();
    let (pairs, a) = setup(dir.path());
    let b = p(dir.path(), "again.ckpt");
    tiny_sft(&pairs, &b, "1");
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());

    let log = fs::read_to_string(format!("{a}.log.jsonl")).unwrap();
    let lines: Vec<serde_json::Value> = log.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    // 6 pairs per direction in batches of 4.
    assert_eq!(lines.len(), 4);
    assert!(lines.iter().all(|l| l["loss"].as_f64().unwrap().is_finite() && l["step"].is_u64()));

    let m = read_json(&format!("{a}.manifest.json"));
    assert_eq!(m["loss_curve"].as_array().unwrap().len(), 4);
    let digest = molalign_cli::manifest::file_digest(Path::new(&pairs)).unwrap();
    assert_eq!(m["inputs"][pairs.as_str()], digest.as_str());
    assert!(m["model_fingerprint"].is_string());
}

#[test]
fn reference_rules_surface_as_config_errors() {
    let dir = tempfile::tempdir().unwrap();
    let (pairs, sft) = setup(dir.path());
    let triples = p(dir.path(), "t.jsonl");
    ok(&["build-triples", "--data", &pairs, "--seed", "2", "--out", &triples]);
    let out = p(dir.path(), "x.ckpt");
    let e = fails_with(&["train", "--method", "dpo", "--data", &triples, "--init", &sft, "--seed", "1", "--out", &out], 2);
    assert!(e.contains("requires a reference"), "{e}");
    let e = fails_with(
        &["train", "--method", "cpo", "--data", &triples, "--init", &sft, "--ref", &sft, "--seed", "1", "--out", &out],
        2,
    );
    assert!(e.contains("reference-free"), "{e}");
    assert!(!Path::new(&out).exists());

    let mut args = vec!["train", "--method", "cpo", "--data", &triples, "--init", &sft, "--seed", "1", "--out", &out];
    args.extend(["--batch-size", "4"]);
    ok(&args);
    let mut args = vec!["train", "--method", "dpo", "--data", &triples, "--init", &out, "--ref", &sft, "--seed", "1"];
    let dpo = p(dir.path(), "dpo.ckpt");
    args.extend(["--out", &dpo, "--batch-size", "4"]);
    ok(&args);
}

#[test]
fn incompatible_reference_is_a_compat_error() {
    let dir = tempfile::tempdir().unwrap();
    let (pairs, sft) = setup(dir.path());
    let other = p(dir.path(), "wide.ckpt");
    ok(&["train", "--method", "sft", "--data", &pairs, "--out", &other, "--seed", "1", "--d-model", "4", "--heads", "1", "--context", "600"]);
    let triples = p(dir.path(), "t.jsonl");
    ok(&["build-triples", "--data", &pairs, "--seed", "2", "--out", &triples]);
    let out = p(dir.path(), "x.ckpt");
    fails_with(&["train", "--method", "dpo", "--data", &triples, "--init", &sft, "--ref", &other, "--seed", "1", "--out", &out], 4);
    fails_with(&["merge", "--algo", "lerp", "--models", &sft, &other, "--out", &out], 4);
}

#[test]
fn exploding_updates_exit_with_divergence() {
    let dir = tempfile::tempdir().unwrap();
    let (pairs, sft) = setup(dir.path());
    let out = p(dir.path(), "boom.ckpt");
    let e = fails_with(
        &["train", "--method", "sft", "--data", &pairs, "--init", &sft, "--lr", "1e300", "--epochs", "3", "--seed", "1", "--out", &out],
        5,
    );
    assert!(e.contains("diverged"), "{e}");
    assert!(!Path::new(&out).exists());
}

#[test]
fn io_and_data_errors_have_their_own_codes() {
    let dir = tempfile::tempdir().unwrap();
    let out = p(dir.path(), "x.ckpt");
    fails_with(&["train", "--method", "sft", "--data", &p(dir.path(), "nope.jsonl"), "--seed", "1", "--out", &out], 1);
    let bad = p(dir.path(), "bad.jsonl");
    fs::write(&bad, "{\"id\": \"a\"}\n").unwrap();
    let e = fails_with(&["train", "--method", "sft", "--data", &bad, "--seed", "1", "--out", &out], 3);
    assert!(e.contains("bad.jsonl:1"), "{e}");
}

#[test]
fn merge_applies_the_ratio_convention() {
    let dir = tempfile::tempdir().unwrap();
    let (pairs, a) = setup(dir.path());
    let b = p(dir.path(), "b.ckpt");
    tiny_sft(&pairs, &b, "2");
    let merged = p(dir.path(), "m.ckpt");
    ok(&["merge", "--algo", "slerp", "--models", &a, &b, "--weights", "19", "1", "--out", &merged]);
    let (pa, pb) = (load_checkpoint(Path::new(&a)).unwrap(), load_checkpoint(Path::new(&b)).unwrap());
    let want = slerp_merge(&pa, &pb, 0.05, 0.9995).unwrap();
    assert_eq!(load_checkpoint(Path::new(&merged)).unwrap(), want);

    ok(&["merge", "--algo", "lerp", "--models", &a, &b, "--weights", "1", "1", "--out", &merged]);
    assert_eq!(load_checkpoint(Path::new(&merged)).unwrap(), lerp_merge(&pa, &pb, 0.5).unwrap());
    let m = read_json(&format!("{merged}.manifest.json"));
    assert_eq!(m["inputs"].as_object().unwrap().len(), 2);

    fails_with(&["merge", "--algo", "ties", "--models", &a, &b, "--base", &a, "--density", "0", "--out", &merged], 2);
    ok(&["merge", "--algo", "ties", "--models", &a, &b, "--base", &a, "--density", "0.5", "--out", &merged]);
}

fn lines(path: &Path) -> Vec<serde_json::Value> {
    fs::read_to_string(path).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect()
}

#[test]
fn eval_on_references_wins_every_molecule() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = p(dir.path(), "pairs.jsonl");
    ok(&["gen-data", "--n", "10", "--seed", "3", "--out", &pairs]);
    let out = dir.path().join("eval");
    ok(&["eval", "--predictions", &pairs, "--references", &pairs, "--out-dir", out.to_str().unwrap()]);
    let report = read_json(out.join("report.json").to_str().unwrap());
    assert_eq!(report["lang2mol"]["win_rate"], 1.0);
    // No scorer: every mol2lang record is excluded and counted as a loss.
    assert_eq!(report["mol2lang"]["nli_excluded"], 5);
    assert_eq!(report["mol2lang"]["wins"], 0);
    let recs = lines(&out.join("records.jsonl"));
    assert_eq!(recs.len(), 10);
    assert!(recs.iter().filter(|r| r["direction"] == "mol2lang").all(|r| r["nli"].is_null()));

    let csv = fs::read_to_string(out.join("hist/lang2mol/chrf.csv")).unwrap();
    assert_eq!(csv.lines().count() - 1, 20 + 2);
    let csv = fs::read_to_string(out.join("hist/lang2mol/delta_len.csv")).unwrap();
    assert_eq!(csv.lines().count() - 1, 100 + 2);
    assert!(out.join("manifest.json").exists());

    ok(&["eval", "--predictions", &pairs, "--references", &pairs, "--nli-scorer", "baseline", "--out-dir", out.to_str().unwrap()]);
    let report = read_json(out.join("report.json").to_str().unwrap());
    assert_eq!(report["mol2lang"]["win_rate"], 1.0);
    assert_eq!(report["mol2lang"]["nli_excluded"], 0);
}

#[test]
fn eval_lists_unaligned_ids() {
    let dir = tempfile::tempdir().unwrap();
    let pairs = p(dir.path(), "pairs.jsonl");
    ok(&["gen-data", "--n", "4", "--seed", "3", "--out", &pairs]);
    let text = fs::read_to_string(&pairs).unwrap();
    let partial = p(dir.path(), "partial.jsonl");
    fs::write(&partial, text.lines().take(2).map(|l| format!("{l}\n")).collect::<String>()).unwrap();
    let out = p(dir.path(), "eval");
    let e = fails_with(&["eval", "--predictions", &partial, "--references", &pairs, "--out-dir", &out], 3);
    assert!(e.contains("pair-000003") && e.contains("pair-000004"), "{e}");
}

#[test]
fn translate_then_eval_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let (pairs, sft) = setup(dir.path());
    let preds = p(dir.path(), "preds.jsonl");
    ok(&["translate", "--model", &sft, "--data", &pairs, "--max-len", "8", "--out", &preds]);
    let recs = lines(Path::new(&preds));
    assert_eq!(recs.len(), 12);
    assert!(recs.iter().all(|r| r["prediction"].as_str().unwrap().chars().count() <= 8));

    let out = p(dir.path(), "eval");
    ok(&["eval", "--predictions", &preds, "--references", &pairs, "--nli-scorer", "baseline", "--out-dir", &out]);
    let table = p(dir.path(), "table.csv");
    let report = format!("{out}/report.json");
    ok(&["report", "--reports", &report, &report, "--labels", "sft", "again", "--out", &table]);
    let csv = fs::read_to_string(&table).unwrap();
    let rows: Vec<&str> = csv.lines().collect();
    assert_eq!(rows.len(), 5);
    assert!(rows[0].starts_with("label,direction,count,wins,win_rate,nli_excluded,"));
    assert!(rows[1].starts_with("sft,lang2mol,6,"));
    fails_with(&["report", "--reports", &report, "--labels", "a", "b", "--out", &table], 2);
}

#[test]
fn help_exits_cleanly() {
    let out = molalign(&["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for cmd in ["gen-data", "split", "build-triples", "train", "translate", "merge", "eval", "report"] {
        assert!(text.contains(cmd), "{cmd} missing from help");
    }
}
