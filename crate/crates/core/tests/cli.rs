//! The `rlvc` binary: exit codes, checkpoint round trip, read-only evaluation.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL_CAMPUS: &str = "task = \"campus\"\ninteractions = 2000\n\n[rlvc]\nmax_iterations = 8\n";

fn rlvc(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rlvc")).args(args).output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn missing_config_is_a_usage_error() {
    let out = rlvc(&["train"]);
    assert_eq!(code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
    assert_eq!(code(&rlvc(&[])), 1);
}

#[test]
fn bad_configs_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.toml");
    fs::write(&cfg, "task = \"campus\"\ninteractions = 0\n").unwrap();
    assert_eq!(code(&rlvc(&["train", "-c", path(&cfg)])), 2);
    fs::write(&cfg, "task = \"campus\"\nunknown_key = 3\n").unwrap();
    assert_eq!(code(&rlvc(&["baseline", "-c", path(&cfg)])), 2);
    assert_eq!(code(&rlvc(&["train", "-c", path(&dir.path().join("absent.toml"))])), 2);
}

#[test]
fn corrupt_checkpoint_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("campus.toml");
    let model = dir.path().join("model.txt");
    fs::write(&cfg, SMALL_CAMPUS).unwrap();
    fs::write(&model, "not a model\n").unwrap();
    assert_eq!(code(&rlvc(&["evaluate", "-c", path(&cfg), "-m", path(&model)])), 3);
}

#[test]
fn train_evaluate_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("campus.toml");
    fs::write(&cfg, SMALL_CAMPUS).unwrap();
    let run = |name: &str| {
        let out = dir.path().join(name);
        let o = rlvc(&["train", "-c", path(&cfg), "--seed", "5", "-o", path(&out)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        out
    };
    let a = run("a");
    let b = run("b");
    let trace = fs::read(a.join("trace.csv")).unwrap();
    assert_eq!(trace, fs::read(b.join("trace.csv")).unwrap());
    assert!(String::from_utf8_lossy(&trace).starts_with("k,classes,"));

    let model = a.join("model.txt");
    let before = fs::read(&model).unwrap();
    let report = dir.path().join("report.csv");
    let o = rlvc(&["evaluate", "-c", path(&cfg), "--seed", "5", "-m", path(&model), "-o", path(&report)]);
    assert_eq!(code(&o), 0);
    assert_eq!(fs::read(&model).unwrap(), before, "evaluate touched the checkpoint");
    let report = fs::read_to_string(report).unwrap();
    assert!(report.lines().nth(1).unwrap().starts_with("campus,"));

    // 44 states x 18 learning pictures
    let o = rlvc(&["export", "-c", path(&cfg), "--seed", "5", "-m", path(&model)]);
    assert_eq!(code(&o), 0);
    assert_eq!(String::from_utf8_lossy(&o.stdout).lines().count(), 1 + 44 * 18);
}

#[test]
fn database_dump() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("campus.toml");
    fs::write(&cfg, "task = \"campus\"\ninteractions = 500\n\n[rlvc]\nmax_iterations = 1\n").unwrap();
    let out = dir.path().join("out");
    assert_eq!(code(&rlvc(&["train", "-c", path(&cfg), "-o", path(&out), "--database"])), 0);
    let csv = fs::read_to_string(out.join("interactions.csv")).unwrap();
    assert!(csv.starts_with("s_id,action,reward,s_next_id,terminal\n"));
    assert_eq!(csv.lines().count(), 501);
    let percepts = fs::read_to_string(out.join("percepts.txt")).unwrap();
    let parsed = rlvc::percept::read_percepts(&percepts).unwrap();
    assert!(!parsed.is_empty());
}

#[test]
fn baseline_grid_matches_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("maze.toml");
    fs::write(&cfg, "task = \"maze\"\ninteractions = 2000\n\n[baseline]\ncells = [7, 9]\n").unwrap();
    let out = dir.path().join("out");
    assert_eq!(code(&rlvc(&["baseline", "-c", path(&cfg), "-o", path(&out)])), 0);
    let grid = fs::read_to_string(out.join("baseline_grid.csv")).unwrap();
    assert_eq!(grid.lines().count(), 1 + 7 * 9);
    assert!(grid.starts_with("i,j,x,y,cell,value,action"));
}
