use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn coevo(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_coevo")).args(args).output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn config() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/mock.toml")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Short mock run shared by several tests.
fn short_run(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let cfg = config();
    let mut args = vec!["run", "--config", s(&cfg), "--out", s(&out), "--override", "generations=6"];
    args.extend_from_slice(extra);
    let o = coevo(&args);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    out
}

#[test]
fn run_writes_artifacts_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let a = short_run(dir.path(), "a", &["--override", "seed=7"]);
    let b = short_run(dir.path(), "b", &["--override", "seed=7"]);
    for f in ["trajectory.jsonl", "preferences.jsonl", "metrics.csv", "summary.json", "manifest.json"] {
        assert!(a.join(f).is_file(), "{f}");
    }
    assert!(std::fs::read_dir(a.join("datasets")).unwrap().count() > 0);
    assert_eq!(std::fs::read(a.join("trajectory.jsonl")).unwrap(), std::fs::read(b.join("trajectory.jsonl")).unwrap());
    let c = short_run(dir.path(), "c", &["--override", "seed=8"]);
    assert_ne!(std::fs::read(a.join("trajectory.jsonl")).unwrap(), std::fs::read(c.join("trajectory.jsonl")).unwrap());

    let manifest: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 7);
    assert_eq!(manifest["config"]["generations"], 6);
    assert_eq!(manifest["trajectory_schema_version"], 1);
}

#[test]
fn config_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.toml");
    let o = coevo(&["run", "--config", s(&missing), "--out", s(&dir.path().join("o"))]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("nope.toml"));
    assert_eq!(stderr(&o).trim().lines().count(), 1);

    let cfg = config();
    let o = coevo(&["run", "--config", s(&cfg), "--out", s(&dir.path().join("o")), "--override", "populaton_size=10"]);
    assert_eq!(code(&o), 1);
    assert!(!dir.path().join("o").exists(), "no work before validation");
    let o = coevo(&["run", "--config", s(&cfg), "--out", s(&dir.path().join("o")), "--override", "generations=0"]);
    assert_eq!(code(&o), 1);
    assert_eq!(code(&coevo(&["frobnicate"])), 1);
}

#[test]
fn init_failure_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let pool = dir.path().join("pool.txt");
    std::fs::write(&pool, (0..50).map(|i| format!("C{}O", "C".repeat(i))).collect::<Vec<_>>().join("\n")).unwrap();
    let cfg = dir.path().join("run.toml");
    let text = std::fs::read_to_string(config()).unwrap().replace(
        "[init]\nkind = \"proposer\"\nbinding = \"frozen\"",
        "[init]\nkind = \"file\"\npath = \"pool.txt\"\nsample_n = 50",
    );
    std::fs::write(&cfg, text).unwrap();
    let o = coevo(&["run", "--config", s(&cfg), "--out", s(&dir.path().join("o")), "--override", "population_size=100"]);
    assert_eq!(code(&o), 2, "{}", stderr(&o));
    let o = coevo(&["run", "--config", s(&cfg), "--out", s(&dir.path().join("ok")), "--override", "generations=2"]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
}

#[test]
fn synthesize_pairs_command() {
    let dir = tempfile::tempdir().unwrap();
    let run = short_run(dir.path(), "r", &[]);
    let log = run.join("trajectory.jsonl");
    let out = dir.path().join("pairs.jsonl");
    let o = coevo(&["synthesize-pairs", "--log", s(&log), "--window", "7", "--pairs-per-prompt", "2", "--out", s(&out)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let lines = std::fs::read_to_string(&out).unwrap().lines().count();
    assert!(lines > 0 && lines <= 14, "{lines}");
    let report: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("pairs.report.json")).unwrap()).unwrap();
    assert_eq!(report["triplets"], lines);
    assert_eq!(report["window_prompts"], 7);

    let empty = dir.path().join("empty.jsonl");
    std::fs::write(&empty, "").unwrap();
    let eout = dir.path().join("e.jsonl");
    let o = coevo(&["synthesize-pairs", "--log", s(&empty), "--window", "5", "--out", s(&eout)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert_eq!(std::fs::read_to_string(&eout).unwrap(), "");
    let report = std::fs::read_to_string(dir.path().join("e.report.json")).unwrap();
    assert!(report.contains("zero similarity samples"));

    let text = std::fs::read_to_string(&log).unwrap();
    let mut lines: Vec<&str> = text.lines().collect();
    lines[4] = "{not json";
    let bad = dir.path().join("bad.jsonl");
    std::fs::write(&bad, lines.join("\n")).unwrap();
    let o = coevo(&["synthesize-pairs", "--log", s(&bad), "--window", "5", "--out", s(&eout)]);
    assert_eq!(code(&o), 3);
    assert!(stderr(&o).contains("line 5"), "{}", stderr(&o));
}

#[test]
fn metrics_command_replays_and_truncates() {
    let dir = tempfile::tempdir().unwrap();
    let run = short_run(dir.path(), "r", &[]);
    let log = run.join("trajectory.jsonl");
    let o = coevo(&["metrics", "--log", s(&log)]);
    assert_eq!(code(&o), 0);
    assert_eq!(o.stdout, std::fs::read(run.join("metrics.csv")).unwrap());

    // Init record plus three and a half generations of ten prompts.
    let text = std::fs::read_to_string(&log).unwrap();
    let partial = dir.path().join("partial.jsonl");
    std::fs::write(&partial, text.lines().take(1 + 35).collect::<Vec<_>>().join("\n") + "\n").unwrap();
    let o = coevo(&["metrics", "--log", s(&partial)]);
    assert_eq!(code(&o), 0);
    let full = String::from_utf8(std::fs::read(run.join("metrics.csv")).unwrap()).unwrap();
    let expect: Vec<&str> = full.lines().take(1 + 3).collect();
    assert_eq!(String::from_utf8(o.stdout).unwrap(), expect.join("\n") + "\n");

    assert_eq!(code(&coevo(&["metrics", "--log", s(&dir.path().join("missing.jsonl"))])), 1);
}

#[test]
fn hv_command() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("pts.txt");
    std::fs::write(&p, "1 1\n").unwrap();
    let o = coevo(&["hv", s(&p)]);
    assert_eq!(String::from_utf8(o.stdout).unwrap().trim(), "1.0");
    std::fs::write(&p, "1 0.5\n0.5 1\n").unwrap();
    let o = coevo(&["hv", s(&p), "--ref", "0,0"]);
    assert_eq!(String::from_utf8(o.stdout).unwrap().trim(), "0.75");
    std::fs::write(&p, "1 0.5\n0.5\n").unwrap();
    assert_eq!(code(&coevo(&["hv", s(&p)])), 1);
    std::fs::write(&p, "1 zero\n").unwrap();
    assert_eq!(code(&coevo(&["hv", s(&p)])), 1);
}

#[test]
fn verify_log_command() {
    let dir = tempfile::tempdir().unwrap();
    let run = short_run(dir.path(), "r", &[]);
    let log = run.join("trajectory.jsonl");
    let o = coevo(&["verify-log", "--log", s(&log)]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(String::from_utf8_lossy(&o.stdout).starts_with("ok:"));

    let text = std::fs::read_to_string(&log).unwrap();
    let mut lines: Vec<String> = text.lines().map(str::to_owned).collect();
    let mut rec: serde_json::Value = serde_json::from_str(&lines[3]).unwrap();
    let id = rec["prompt_id"].as_u64().unwrap();
    let i = rec["candidates"].as_array().unwrap().iter().position(|c| c["valid"] == true).unwrap();
    let x = rec["candidates"][i]["oriented"][1].as_f64().unwrap();
    rec["candidates"][i]["oriented"][1] = (if x > 0.5 { x - 0.5 } else { x + 0.5 }).into();
    lines[3] = rec.to_string();
    let bad = dir.path().join("tampered.jsonl");
    std::fs::write(&bad, lines.join("\n") + "\n").unwrap();
    let o = coevo(&["verify-log", "--log", s(&bad)]);
    assert_eq!(code(&o), 4);
    assert!(stderr(&o).contains(&format!("record {id}")), "{}", stderr(&o));
}
