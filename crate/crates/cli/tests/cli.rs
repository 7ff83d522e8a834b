use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn rbs(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rbs")).args(args).output().unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn text(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("scenario.toml");
    fs::write(&p, body).unwrap();
    p.to_str().unwrap().to_string()
}

const SMALL: &str = "duration = 400\ntx_rate = 0.5\ncross_fraction = 0.3\nrecord_trace = true\n";

#[test]
fn run_writes_report_and_trace_that_replays() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    let o = rbs(&[
        "run",
        "--config",
        &cfg,
        "--seed",
        "5",
        "--out",
        out.to_str().unwrap(),
        "--format",
        "rows",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let rows = fs::read_to_string(out.join("rows.csv")).unwrap();
    assert_eq!(rows, text(&o));
    assert!(rows.starts_with("series,x,record,key,value\n"));

    let trace = out.join("trace.csv");
    let r = rbs(&["replay", "--trace", trace.to_str().unwrap()]);
    assert_eq!(code(&r), 0, "{}", text(&r));
    assert!(text(&r).contains("balances_ok=true"));
}

#[test]
fn same_seed_same_output() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let a = rbs(&["run", "--config", &cfg, "--format", "table"]);
    let b = rbs(&["run", "--config", &cfg, "--format", "table"]);
    assert_eq!(code(&a), 0);
    assert_eq!(a.stdout, b.stdout);
}

#[test]
fn tampered_trace_is_an_invariant_violation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), SMALL);
    let out = dir.path().join("out");
    assert_eq!(
        code(&rbs(&["run", "--config", &cfg, "--out", out.to_str().unwrap()])),
        0
    );
    let path = out.join("trace.csv");
    let body = fs::read_to_string(&path).unwrap();
    let line = body.lines().find(|l| l.contains("amount=")).unwrap().to_string();
    let bumped = line.replacen("amount=", "amount=9", 1);
    fs::write(&path, body.replacen(&line, &bumped, 1)).unwrap();
    assert_eq!(code(&rbs(&["replay", "--trace", path.to_str().unwrap()])), 3);
}

#[test]
fn config_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let unknown = write_config(dir.path(), "duration = 100\nbogus_key = 1\n");
    assert_eq!(code(&rbs(&["run", "--config", &unknown])), 2);
    let bad = write_config(dir.path(), "drop_rate = 2.0\n");
    assert_eq!(code(&rbs(&["run", "--config", &bad])), 2);
    assert_eq!(code(&rbs(&["run", "--config", "/nonexistent/x.toml"])), 2);
    assert_eq!(code(&rbs(&["run", "--config", &bad, "--preset", "nope"])), 2);
}

#[test]
fn models_evaluate_and_reject_bad_domains() {
    let o = rbs(&["models", "--name", "ShardedThroughput", "--params", "n_s=4,t_s=12.5"]);
    assert_eq!(code(&o), 0);
    assert_eq!(text(&o).trim(), "ShardedThroughput = 50");
    let o = rbs(&["models", "--name", "FaultProb", "--params", "m=5,t=10"]);
    assert_eq!(code(&o), 2);
    let o = rbs(&["models", "--name", "FaultProb", "--params", "m=1"]);
    assert_eq!(code(&o), 2);
}

#[test]
fn preset_plot_has_one_row_per_point() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(dir.path(), "duration = 300\n");
    let o = rbs(&["run", "--config", &cfg, "--preset", "locking", "--format", "plot"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let t = text(&o);
    let lines: Vec<&str> = t.lines().collect();
    assert_eq!(lines[0], "x,y,series");
    assert_eq!(lines.len(), 3);
}
