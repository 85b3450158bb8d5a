//! Runs the `attractor` binary end to end on tiny copy-task configurations.

use std::path::Path;
use std::process::{Command, Output};

const TINY: [&str; 8] = [
    "task.kind=copy",
    "task.len=8",
    "task.symbols=6",
    "model.d=16",
    "model.d_ff=32",
    "model.heads=2",
    "train.batch=4",
    "task.eval_batch=8",
];

fn attractor(sub: &str, out: &Path, extra: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_attractor"))
        .arg(sub)
        .arg("--out")
        .arg(out)
        .args(TINY)
        .args(extra)
        .output()
        .expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn csv_rows(path: &Path) -> Vec<csv::StringRecord> {
    csv::Reader::from_path(path).unwrap().records().map(|r| r.unwrap()).collect()
}

#[test]
fn unknown_key_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = attractor("train", dir.path(), &["model.depth=3"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("model.depth"));
    let o = attractor("train", dir.path(), &["solver.tol=-1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("solver.tol"));
    assert!(!dir.path().join("metrics.csv").exists());
}

#[test]
fn resume_continues_step_numbering() {
    let dir = tempfile::tempdir().unwrap();
    let o = attractor("train", dir.path(), &["train.steps=3"]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["config.txt", "metrics.csv", "model.ckpt", "optim.ckpt"] {
        assert!(dir.path().join(f).exists(), "{f}");
    }
    let o = attractor("train", dir.path(), &["train.steps=6"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let steps: Vec<String> = csv_rows(&dir.path().join("metrics.csv")).iter().map(|r| r[0].to_string()).collect();
    assert_eq!(steps, ["0", "1", "2", "3", "4", "5"]);
}

#[test]
fn changed_architecture_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    assert!(attractor("train", dir.path(), &["train.steps=1"]).status.success());
    let o = attractor("eval", dir.path(), &["model.d_ff=48", "--t-sweep", "1"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("model.d_ff"), "{}", stderr(&o));
}

#[test]
fn eval_writes_one_row_per_budget() {
    let dir = tempfile::tempdir().unwrap();
    assert!(attractor("train", dir.path(), &["train.steps=2"]).status.success());
    let o = attractor("eval", dir.path(), &["--t-sweep", "0,2"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(csv_rows(&dir.path().join("tsweep.csv")).len(), 3);
}

#[test]
fn plain_eval_ignores_the_sweep() {
    let dir = tempfile::tempdir().unwrap();
    assert!(attractor("train", dir.path(), &["train.steps=2", "model.family=plain"]).status.success());
    let o = attractor("eval", dir.path(), &["model.family=plain", "--t-sweep", "0,1,4"]);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stderr(&o).contains("ignored"));
    assert_eq!(csv_rows(&dir.path().join("tsweep.csv")).len(), 1);
}

#[test]
fn injection_grid_has_three_rows() {
    let dir = tempfile::tempdir().unwrap();
    let o = attractor("ablate", dir.path(), &["train.steps=2", "--grid", "injection"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let rows = csv_rows(&dir.path().join("ablate_injection.csv"));
    let names: Vec<&str> = rows.iter().map(|r| &r[0]).collect();
    assert_eq!(names.len(), 3, "{names:?}");
}

#[test]
fn unknown_grid_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let o = attractor("ablate", dir.path(), &["--grid", "depth"]);
    assert_eq!(o.status.code(), Some(1));
}
