use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn cadmus(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cadmus"))
        .env_remove("CADMUS_SEED")
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(out: &Output) -> String {
    String::from_utf8(out.stdout.clone()).unwrap()
}

#[test]
fn classify_exit_codes() {
    let t = cadmus(&["-q", "classify", "34+7=."]);
    assert_eq!(t.status.code(), Some(0));
    assert_eq!(stdout(&t), "TRUE\n");
    let f = cadmus(&["-q", "classify", "[34+8=.]"]);
    assert_eq!(f.status.code(), Some(1));
    assert_eq!(stdout(&f), "FALSE\n");
    let alt = cadmus(&["-q", "--form", "alt", "classify", "+!*1~."]);
    assert_eq!(alt.status.code(), Some(0));
}

#[test]
fn run_and_trace() {
    assert_eq!(stdout(&cadmus(&["-q", "run", "90/3"])), "NAN 3\n");
    assert_eq!(stdout(&cadmus(&["-q", "run", "."])), "\n");
    let trace = stdout(&cadmus(&["-q", "trace", "12+."]));
    let lines: Vec<&str> = trace.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(lines[2], r#"{"pos":2,"token":11,"stack":[3]}"#);
    let nan = stdout(&cadmus(&["-q", "trace", "10/"]));
    assert!(nan.lines().last().unwrap().contains(r#""stack":["NAN"]"#));
}

#[test]
fn transcode_both_ways() {
    assert_eq!(stdout(&cadmus(&["-q", "transcode", "--to", "alt", "34+7=."])), "+!*1~.\n");
    assert_eq!(stdout(&cadmus(&["-q", "transcode", "--to", "std", "+!*1~."])), "34+7=.\n");
}

#[test]
fn baseline_prints_every_prefix_length() {
    let out = stdout(&cadmus(&["-q", "baseline", "--length", "5"]));
    let values: Vec<f64> = out.lines().map(|l| l.split('\t').nth(1).unwrap().parse().unwrap()).collect();
    assert_eq!(values.len(), 6);
    assert_eq!(values[5], 1.0);
}

#[test]
fn isa_dump_is_json() {
    let out = stdout(&cadmus(&["-q", "isa-dump"]));
    let rows: serde_json::Value = serde_json::from_str(&out).unwrap();
    let rows = rows.as_array().unwrap();
    assert_eq!(rows.len(), 27);
    assert_eq!(rows[10]["std"], "9");
    assert_eq!(rows[10]["alt"], "^");
}

#[test]
fn usage_errors_exit_2() {
    assert_eq!(cadmus(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(cadmus(&["-q", "run", "34$"]).status.code(), Some(2));
    assert_eq!(cadmus(&["-q", "sample", "--template", "nope"]).status.code(), Some(2));
    assert_eq!(cadmus(&["-q", "transcode", "--to", "alt", "{1}a."]).status.code(), Some(2));
    assert_eq!(cadmus(&["--help"]).status.code(), Some(0));
}

#[test]
fn io_errors_exit_3() {
    let out = cadmus(&["-q", "score", "--grid", "/nonexistent/grid.jsonl", "--responses", "/nonexistent/r.jsonl"]);
    assert_eq!(out.status.code(), Some(3));
    let dir = tempfile::tempdir().unwrap();
    let blocker = dir.path().join("file");
    fs::write(&blocker, "").unwrap();
    let out = cadmus(&["-q", "--output", blocker.join("sub").to_str().unwrap(), "enum", "--length", "2"]);
    assert_eq!(out.status.code(), Some(3));
}

fn corpus_bytes(dir: &Path, name: &str) -> (Vec<u8>, String) {
    let data = fs::read(dir.join(format!("{name}.txt"))).unwrap();
    let manifest = fs::read_to_string(dir.join(format!("{name}.manifest.json"))).unwrap();
    (data, manifest)
}

#[test]
fn seed_flag_env_and_config_agree() {
    let dir = tempfile::tempdir().unwrap();
    let out = |sub: &str| dir.path().join(sub).to_str().unwrap().to_string();
    let a = cadmus(&["-q", "--seed", "5", "--output", &out("a"), "sample", "--template", "equality", "--count", "200"]);
    assert!(a.status.success());
    let b = Command::new(env!("CARGO_BIN_EXE_cadmus"))
        .env("CADMUS_SEED", "5")
        .args(["-q", "--output", &out("b"), "sample", "--template", "equality", "--count", "200"])
        .output()
        .unwrap();
    assert!(b.status.success());
    let config = dir.path().join("cadmus.toml");
    fs::write(&config, "seed = 5\nquiet = true\n").unwrap();
    let c = cadmus(&["--config", config.to_str().unwrap(), "--output", &out("c"), "sample", "--template", "equality", "--count", "200"]);
    assert!(c.status.success());
    assert!(c.stderr.is_empty());
    let d = cadmus(&["-q", "--seed", "6", "--output", &out("d"), "sample", "--template", "equality", "--count", "200"]);
    let reference = corpus_bytes(&dir.path().join("a"), "equality");
    assert_eq!(corpus_bytes(&dir.path().join("b"), "equality"), reference);
    assert_eq!(corpus_bytes(&dir.path().join("c"), "equality"), reference);
    assert!(d.status.success());
    assert_ne!(corpus_bytes(&dir.path().join("d"), "equality").0, reference.0);
}

#[test]
fn resolved_config_is_logged() {
    let out = cadmus(&["--seed", "9", "--form", "alt", "isa-dump"]);
    let err = String::from_utf8(out.stderr).unwrap();
    assert!(err.contains(r#""seed":9"#), "{err}");
    assert!(err.contains(r#""form":"alternate""#), "{err}");
}

#[test]
fn bad_config_is_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("bad.toml");
    fs::write(&config, "sed = 1\n").unwrap();
    assert_eq!(cadmus(&["--config", config.to_str().unwrap(), "isa-dump"]).status.code(), Some(2));
}

#[test]
fn mixture_split_writes_both_parts() {
    let dir = tempfile::tempdir().unwrap();
    let out = cadmus(&[
        "-q", "--seed", "3", "--output", dir.path().to_str().unwrap(), "mixture", "--divisor", "40000", "--split", "0.8",
        "--format", "binary",
    ]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let train: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("mixture.train.manifest.json")).unwrap()).unwrap();
    let validation: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(dir.path().join("mixture.validation.manifest.json")).unwrap()).unwrap();
    let total = train["count"].as_u64().unwrap() + validation["count"].as_u64().unwrap();
    assert_eq!(total, 1005);
    assert!(dir.path().join("mixture.train.bin").exists());
}

#[test]
fn enum_cache_and_grid() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    assert_eq!(stdout(&cadmus(&["-q", "--output", d, "enum"])), "91300\n");
    assert!(dir.path().join("values.values.tsv").exists());
    let out = stdout(&cadmus(&["-q", "--output", d, "grid", "--bound", "3", "--k", "2", "--comparisons", "<>"]));
    assert_eq!(out, "42 cells, 84 programs\n");
    let bad = cadmus(&["-q", "--output", d, "grid", "--bound", "100000"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn eval_and_score_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    assert!(cadmus(&["-q", "--output", d, "grid", "--bound", "4", "--k", "3"]).status.success());
    let grid = dir.path().join("grid.jsonl");
    let grid = grid.to_str().unwrap();
    let self_cmd = format!("'{}' -q oracle-predictor", env!("CARGO_BIN_EXE_cadmus"));
    let oracle = stdout(&cadmus(&["-q", "--output", d, "eval", "--grid", grid, "--predictor", &self_cmd]));
    assert!(oracle.starts_with("aggregate 1 in_dist 1 cells 81 requests 243 correct 243 missing 0"), "{oracle}");
    let eq = stdout(&cadmus(&["-q", "--output", d, "eval", "--grid", grid, "--builtin", "constant", "--name", "eq"]));
    assert!(eq.starts_with(&format!("aggregate {} ", 9.0 / 81.0)), "{eq}");
    let responses = dir.path().join("eq.responses.jsonl");
    let scored = stdout(&cadmus(&[
        "-q", "--output", d, "score", "--grid", grid, "--responses", responses.to_str().unwrap(),
    ]));
    assert_eq!(scored, eq);
    assert_eq!(fs::read(dir.path().join("eq.csv")).unwrap(), fs::read(dir.path().join("score.csv")).unwrap());
    let summary: serde_json::Value = serde_json::from_str(&fs::read_to_string(dir.path().join("eq.json")).unwrap()).unwrap();
    assert_eq!(summary["k"], 3);
    assert_eq!(summary["spec"]["k"], 3);
}

#[test]
fn misbehaving_predictor_is_reported() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    assert!(cadmus(&["-q", "--output", d, "grid", "--bound", "1", "--k", "1"]).status.success());
    let grid = dir.path().join("grid.jsonl");
    let out = cadmus(&[
        "-q", "--output", d, "eval", "--grid", grid.to_str().unwrap(), "--predictor",
        "echo '{\"id\":0,\"argmax\":11}'; cat >/dev/null",
    ]);
    assert_eq!(out.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&out.stderr).contains("protocol violation"));
    let silent = stdout(&cadmus(&[
        "-q", "--output", d, "eval", "--grid", grid.to_str().unwrap(), "--predictor", "exec sleep 20", "--timeout", "0.3",
    ]));
    assert!(silent.contains("missing 9"), "{silent}");
}

#[test]
fn prompts_for_full_grid() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path().to_str().unwrap();
    assert!(cadmus(&["-q", "--output", d, "grid", "--bound", "20", "--k", "1"]).status.success());
    let grid = dir.path().join("grid.jsonl");
    let out = cadmus(&["-q", "--form", "alt", "--output", d, "prompts", "--grid", grid.to_str().unwrap(), "--token-budget", "512"]);
    assert_eq!(stdout(&out), "1681\n");
    let index = fs::read_to_string(dir.path().join("prompts/prompts.jsonl")).unwrap();
    assert_eq!(index.lines().count(), 1681);
    let first: serde_json::Value = serde_json::from_str(index.lines().next().unwrap()).unwrap();
    assert_eq!(first["token_budget"], 512);
    let prompt = fs::read_to_string(dir.path().join("prompts").join(first["file"].as_str().unwrap())).unwrap();
    assert!(prompt.contains("push 6"));
}
