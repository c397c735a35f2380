use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn virreq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_virreq"))
        .args(args)
        .env_remove("VIRREQ_DATA_DIR")
        .env("SOURCE_DATE_EPOCH", "0")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = virreq(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).expect("utf-8 stdout")
}

fn ok_json(args: &[&str]) -> Value {
    let mut full = vec!["--json"];
    full.extend_from_slice(args);
    serde_json::from_str(&ok(&full)).expect("stdout is one JSON document")
}

fn schema(name: &str) -> jsonschema::Validator {
    let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("schemas").join(format!("{name}.schema.json"));
    let s: Value = serde_json::from_str(&std::fs::read_to_string(p).unwrap()).unwrap();
    jsonschema::validator_for(&s).expect("schema compiles")
}

fn assert_valid(name: &str, v: &Value) {
    let errors: Vec<String> = schema(name).iter_errors(v).map(|e| e.to_string()).collect();
    assert!(errors.is_empty(), "{name} output invalid: {errors:?}\n{v:#}");
}

fn p(d: &TempDir, rel: &str) -> String {
    d.path().join(rel).to_str().unwrap().to_string()
}

/// A small perturbed corpus under `d/data`.
fn corpus(d: &TempDir, n: &str, seed: &str) {
    let spec = p(d, "spec.json");
    std::fs::write(&spec, r#"{"width":48,"height":48,"perturb":{"morph_radius":1,"class_flip":0.2,"drop":0.1}}"#)
        .unwrap();
    ok(&["--seed", seed, "gen", "--spec", &spec, "--n", n, "--out", &p(d, "data")]);
}

fn tree_files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.to_string_lossy().ends_with(".tree.json"))
        .map(|p| (p.file_name().unwrap().to_string_lossy().into_owned(), std::fs::read(&p).unwrap()))
        .collect();
    v.sort();
    v
}

#[test]
fn unknown_flag_exits_2() {
    let o = virreq(&["eval", "--no-such-flag"]);
    assert_eq!(o.status.code(), Some(2));
    assert_eq!(virreq(&["--help"]).status.code(), Some(0));
    assert_eq!(virreq(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn runtime_errors_exit_1_with_json_error() {
    let d = TempDir::new().unwrap();
    let o = virreq(&["--json", "eval", "--gt-dir", &p(&d, "nope"), "--pred-dir", &p(&d, "nope")]);
    assert_eq!(o.status.code(), Some(1));
    let v: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_valid("error", &v);
    assert!(!o.stderr.is_empty());
}

#[test]
fn gen_is_seed_deterministic() {
    let a = TempDir::new().unwrap();
    let b = TempDir::new().unwrap();
    let c = TempDir::new().unwrap();
    corpus(&a, "4", "11");
    corpus(&b, "4", "11");
    corpus(&c, "4", "12");
    let ga = tree_files(&a.path().join("data/gt"));
    assert_eq!(ga.len(), 4);
    assert_eq!(ga, tree_files(&b.path().join("data/gt")));
    assert_eq!(tree_files(&a.path().join("data/pred")), tree_files(&b.path().join("data/pred")));
    assert_ne!(ga, tree_files(&c.path().join("data/gt")));
    assert!(a.path().join("data/images/img00000.png").is_file());
}

#[test]
fn eval_of_ground_truth_against_itself_is_perfect() {
    let d = TempDir::new().unwrap();
    corpus(&d, "3", "1");
    let gt = p(&d, "data/gt");
    for metric in ["hpq", "pq", "miou"] {
        let v = ok_json(&["eval", "--gt-dir", &gt, "--pred-dir", &gt, "--metric", metric]);
        assert_valid("eval", &v);
        assert_eq!(v["score"].as_f64(), Some(1.0), "{metric}");
    }
    let v = ok_json(&["eval", "--gt-dir", &gt, "--pred-dir", &p(&d, "data/pred")]);
    assert!(v["score"].as_f64().unwrap() < 1.0);
}

#[test]
fn eval_report_file_matches_stdout() {
    let d = TempDir::new().unwrap();
    corpus(&d, "2", "5");
    let report = p(&d, "r.json");
    let v = ok_json(&["eval", "--gt-dir", &p(&d, "data/gt"), "--pred-dir", &p(&d, "data/pred"), "--report", &report]);
    let file: Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v, file);
}

#[test]
fn missing_prediction_scores_as_empty() {
    let d = TempDir::new().unwrap();
    corpus(&d, "2", "3");
    std::fs::remove_file(d.path().join("data/pred/img00001.tree.json")).unwrap();
    let v = ok_json(&["eval", "--gt-dir", &p(&d, "data/gt"), "--pred-dir", &p(&d, "data/pred")]);
    assert_eq!(v["missing_predictions"], serde_json::json!(["img00001"]));
}

#[test]
fn oracle_run_then_eval_is_perfect() {
    let d = TempDir::new().unwrap();
    corpus(&d, "3", "2");
    let v = ok_json(&["run", "--backend", "oracle", "--gt-dir", &p(&d, "data/gt"), "--out", &p(&d, "runs")]);
    assert_valid("run", &v);
    assert_eq!(v["misses"], 0);
    let e = ok_json(&["eval", "--gt-dir", &p(&d, "data/gt"), "--pred-dir", &p(&d, "runs")]);
    assert_eq!(e["score"].as_f64(), Some(1.0));
    assert!(d.path().join("runs/img00000.log.jsonl").is_file());
}

#[test]
fn nonprobing_oracle_run_is_seed_independent_and_valid() {
    let d = TempDir::new().unwrap();
    corpus(&d, "2", "4");
    let gt = p(&d, "data/gt");
    let a = ok_json(&["--seed", "1", "run", "--mode", "nonprobing", "--gt-dir", &gt, "--out", &p(&d, "a")]);
    ok_json(&["--seed", "2", "run", "--mode", "nonprobing", "--gt-dir", &gt, "--out", &p(&d, "b")]);
    assert_valid("run", &a);
    assert_eq!(tree_files(&d.path().join("a")), tree_files(&d.path().join("b")));
}

#[test]
fn probing_run_is_seed_deterministic() {
    let d = TempDir::new().unwrap();
    corpus(&d, "2", "6");
    let gt = p(&d, "data/gt");
    for out in ["a", "b"] {
        ok(&["--seed", "9", "run", "--gamma", "0.5", "--gt-dir", &gt, "--out", &p(&d, out)]);
    }
    assert_eq!(tree_files(&d.path().join("a")), tree_files(&d.path().join("b")));
}

#[test]
fn parsed_stream_replays_to_the_same_tree() {
    let d = TempDir::new().unwrap();
    corpus(&d, "1", "7");
    let gt = p(&d, "data/gt/img00000.tree.json");
    let stream = p(&d, "r.jsonl");
    ok(&["parse-requests", "--gt", &gt, "--out", &stream]);
    let kb_dir = d.path().join("data/kb");
    let kb = std::fs::read_dir(&kb_dir).unwrap().next().unwrap().unwrap().path();
    let out = p(&d, "replayed.tree.json");
    ok(&["run", "--script", &stream, "--kb", kb.to_str().unwrap(), "--out", &out]);
    let e = ok_json(&["eval", "--gt-dir", &p(&d, "data/gt"), "--pred-dir", d.path().to_str().unwrap()]);
    assert_eq!(e["score"].as_f64(), Some(1.0));
}

#[test]
fn sample_probes_json_and_lines() {
    let d = TempDir::new().unwrap();
    corpus(&d, "1", "8");
    let gt = p(&d, "data/gt/img00000.tree.json");
    let v = ok_json(&["--seed", "3", "sample-probes", "--tree", &gt, "--node", "1", "--gamma", "1", "--count", "5"]);
    assert_valid("probes", &v);
    assert_eq!(v["probes"].as_array().unwrap().len(), 5);
    let text = ok(&["--seed", "3", "sample-probes", "--tree", &gt, "--node", "1", "--gamma", "1", "--count", "5"]);
    let lines: Vec<Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(Value::Array(lines), v["probes"]);
}

#[test]
fn subsample_settings_validate() {
    let d = TempDir::new().unwrap();
    corpus(&d, "3", "9");
    let gt = p(&d, "data/gt");
    let s1 = ok_json(&["subsample", "--setting", "1", "--ratio", "0.5", "--gt-dir", &gt, "--out", &p(&d, "s1")]);
    assert_valid("subsample", &s1);
    let s2 = ok_json(&["subsample", "--setting", "2", "--ratio", "0.5", "--gt-dir", &gt, "--out", &p(&d, "s2")]);
    assert_valid("subsample", &s2);
    let full = ok_json(&["subsample", "--setting", "1", "--ratio", "1", "--gt-dir", &gt, "--out", &p(&d, "s3")]);
    assert_eq!(full["stats"]["parts"]["considered"], full["stats"]["parts"]["kept"]);
    assert_eq!(virreq(&["subsample", "--setting", "3", "--ratio", "0.5", "--out", "x"]).status.code(), Some(2));
    assert_eq!(
        virreq(&["subsample", "--setting", "1", "--ratio", "1.5", "--gt-dir", &gt, "--out", "x"]).status.code(),
        Some(1)
    );
}

#[test]
fn gen_output_validates() {
    let d = TempDir::new().unwrap();
    let v = ok_json(&["gen", "--n", "2", "--no-images", "--out", &p(&d, "data")]);
    assert_valid("gen", &v);
    assert_eq!(v["predictions"], 0);
    assert!(!d.path().join("data/images").exists());
}

#[test]
fn kb_commands_version_and_diff() {
    let d = TempDir::new().unwrap();
    let base = p(&d, "base.json");
    ok(&["kb", "init", "--builtin", "synthetic", "--out", &base]);
    let shown = ok(&["kb", "show", "--kb", &base, "--class", "car"]);
    assert!(shown.contains("wheel"));
    let added = p(&d, "added.json");
    ok(&["kb", "add", "--kb", &base, "--parent", "car", "--label", "mirror", "--out", &added]);
    let diff = ok_json(&["kb", "diff", &base, &added]);
    assert!(diff.to_string().contains("mirror"));
    let copied = p(&d, "copied.json");
    ok(&["kb", "copy", "--kb", &added, "--from", "car", "--to", "pole", "--out", &copied]);
    assert!(ok(&["kb", "show", "--kb", &copied, "--class", "pole"]).contains("mirror"));
    let o =
        virreq(&["kb", "add", "--kb", &base, "--parent", "no-such-class", "--label", "x", "--out", &p(&d, "x.json")]);
    assert_eq!(o.status.code(), Some(1));
}
