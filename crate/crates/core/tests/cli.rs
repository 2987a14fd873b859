use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use gridgnn::cli::{CSV_HEADER, TIMING_COLUMNS};

fn gridgnn(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gridgnn"))
        .args(args)
        .current_dir(dir)
        .env_remove("GRIDGNN_THREADS")
        .output()
        .expect("spawn")
}

const SMALL: &[&str] = &["--nodes", "96", "--d-in", "12", "--classes", "4", "--d-h", "8", "--batch-size", "24"];

fn train(dir: &Path, out: &str, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out", out, "--epochs", "2"];
    args.extend_from_slice(SMALL);
    args.extend_from_slice(extra);
    gridgnn(dir, &args)
}

/// Rows of the CSV with timing columns removed.
fn numeric_columns(path: &Path) -> Vec<Vec<String>> {
    let text = fs::read_to_string(path).unwrap();
    let mut lines = text.lines();
    let header: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(header, CSV_HEADER);
    lines
        .map(|l| {
            l.split(',')
                .zip(&header)
                .filter(|(_, h)| !TIMING_COLUMNS.contains(h))
                .map(|(v, _)| v.to_string())
                .collect()
        })
        .collect()
}

fn column(rows: &[Vec<String>], name: &str) -> Vec<u64> {
    let idx = CSV_HEADER
        .iter()
        .filter(|h| !TIMING_COLUMNS.contains(h))
        .position(|h| *h == name)
        .unwrap();
    rows.iter().map(|r| r[idx].parse().unwrap()).collect()
}

#[test]
fn train_writes_epoch_rows_deterministically() {
    let dir = tempfile::tempdir().unwrap();
    let a = train(dir.path(), "a.csv", &["--grid", "1x1x1x1"]);
    assert!(a.status.success(), "{}", String::from_utf8_lossy(&a.stderr));
    let b = train(dir.path(), "b.csv", &["--grid", "1x1x1x1"]);
    assert!(b.status.success());
    let rows = numeric_columns(&dir.path().join("a.csv"));
    assert_eq!(rows.len(), 2);
    assert_eq!(rows, numeric_columns(&dir.path().join("b.csv")));
}

#[test]
fn replicas_leave_per_group_model_bytes_unchanged() {
    let dir = tempfile::tempdir().unwrap();
    // Same total steps: 2 replicas each draw the same number of batches per epoch
    // as one replica would over half the epoch.
    let one = train(dir.path(), "one.csv", &["--grid", "1x2x1x2"]);
    let two = train(dir.path(), "two.csv", &["--grid", "2x2x1x2"]);
    assert!(one.status.success() && two.status.success());
    let r1 = numeric_columns(&dir.path().join("one.csv"));
    let r2 = numeric_columns(&dir.path().join("two.csv"));
    let steps1 = column(&r1, "step")[0];
    let steps2 = column(&r2, "step")[0];
    for axis in ["bytes_x", "bytes_y", "bytes_z"] {
        let per_step_group_1 = column(&r1, axis)[0] / steps1;
        let per_step_group_2 = column(&r2, axis)[0] / steps2 / 2;
        assert_eq!(per_step_group_1, per_step_group_2, "{axis}");
    }
    assert_eq!(column(&r1, "bytes_d"), vec![0, 0]);
    assert!(column(&r2, "bytes_d")[0] > 0);
}

#[test]
fn prefetch_and_thread_cap_do_not_change_numbers() {
    let dir = tempfile::tempdir().unwrap();
    assert!(train(dir.path(), "a.csv", &["--grid", "2x1x2x1"]).status.success());
    assert!(train(dir.path(), "b.csv", &["--grid", "2x1x2x1", "--prefetch"]).status.success());
    let capped = Command::new(env!("CARGO_BIN_EXE_gridgnn"))
        .args(["train", "--out", "c.csv", "--epochs", "2", "--grid", "2x1x2x1"])
        .args(SMALL)
        .current_dir(dir.path())
        .env("GRIDGNN_THREADS", "1")
        .output()
        .unwrap();
    assert!(capped.status.success(), "{}", String::from_utf8_lossy(&capped.stderr));
    let a = numeric_columns(&dir.path().join("a.csv"));
    assert_eq!(a, numeric_columns(&dir.path().join("b.csv")));
    assert_eq!(a, numeric_columns(&dir.path().join("c.csv")));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(
        dir.path().join("run.cfg"),
        "# small run\nnodes = 64\nd_in = 8\nclasses = 4\nd_h = 8\nbatch_size = 16\nepochs = 3\ngrid = 1x2x1x1\n",
    )
    .unwrap();
    let out = gridgnn(dir.path(), &["train", "--config", "run.cfg", "--epochs", "1", "--out", "m.csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(numeric_columns(&dir.path().join("m.csv")).len(), 1);
}

#[test]
fn invalid_input_exits_nonzero_without_output() {
    let dir = tempfile::tempdir().unwrap();
    for bad in [
        &["--grid", "2x2x2"][..],
        &["--batch-size", "1"],
        &["--precision", "fp8"],
        &["--no-such-flag"],
        &["--batch-size", "1000"],
        &["--data", "missing-dir"],
    ] {
        let out = train(dir.path(), "m.csv", bad);
        assert!(!out.status.success(), "{bad:?}");
        assert!(!out.stderr.is_empty());
        assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0, "{bad:?} left files behind");
    }
    let env = Command::new(env!("CARGO_BIN_EXE_gridgnn"))
        .args(["train", "--out", "m.csv"])
        .args(SMALL)
        .current_dir(dir.path())
        .env("GRIDGNN_THREADS", "zero")
        .output()
        .unwrap();
    assert!(!env.status.success());
    assert_eq!(fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn help_lists_every_flag() {
    let dir = tempfile::tempdir().unwrap();
    let out = gridgnn(dir.path(), &["train", "--help"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for flag in ["--config", "--grid", "--batch-size", "--epochs", "--seed", "--precision", "--prefetch", "--out"] {
        assert!(text.contains(flag), "{flag} missing from help");
    }
    let top = String::from_utf8(gridgnn(dir.path(), &["--help"]).stdout).unwrap();
    for cmd in ["train", "verify", "sample-stats", "gen"] {
        assert!(top.contains(cmd));
    }
}

#[test]
fn verify_passes_and_detects_perturbation() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["verify", "--grid", "2x2x1x2"];
    args.extend_from_slice(SMALL);
    let ok = gridgnn(dir.path(), &args);
    let text = String::from_utf8_lossy(&ok.stdout);
    assert!(ok.status.success(), "{text}");
    assert!(text.contains("gradient check"));
    args.extend_from_slice(&["--perturb", "1e-4"]);
    let bad = gridgnn(dir.path(), &args);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL"));
}

#[test]
fn gen_is_reproducible_and_loadable() {
    let dir = tempfile::tempdir().unwrap();
    for name in ["a", "b"] {
        let out = gridgnn(dir.path(), &["gen", "--nodes", "50", "--seed", "3", "--out", name]);
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    }
    let names = ["edges.txt", "features.sgnf", "labels.sgnl", "split.sgns"];
    for f in names {
        let a = fs::read(dir.path().join("a").join(f));
        let b = fs::read(dir.path().join("b").join(f));
        assert!(a.is_ok(), "{f} missing");
        assert_eq!(a.unwrap(), b.unwrap(), "{f}");
    }
    let ds = gridgnn::graph::load_dataset_dir(&dir.path().join("a")).unwrap();
    assert_eq!((ds.n(), ds.d_in(), ds.n_classes), (50, 128, 32));
    let out = gridgnn(
        dir.path(),
        &["train", "--data", "a", "--batch-size", "10", "--d-h", "4", "--epochs", "1", "--out", "m.csv"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn sample_stats_reports_zero_bias_for_full_batch() {
    let dir = tempfile::tempdir().unwrap();
    let out = gridgnn(
        dir.path(),
        &["sample-stats", "--nodes", "40", "--batch-size", "40", "--trials", "20", "--out", "s.csv"],
    );
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("max relative bias 0.0000e0"), "{text}");
    let rows = fs::read_to_string(dir.path().join("s.csv")).unwrap();
    assert_eq!(rows.lines().count(), 41);
}
