use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--dataset",
    "synthetic",
    "--train-limit",
    "24",
    "--test-limit",
    "12",
    "--epochs",
    "1",
    "--batch-size",
    "12",
    "--stem-channels",
    "4",
    "--primary-types",
    "4",
    "--decoder-hidden1",
    "16",
    "--decoder-hidden2",
    "32",
];

fn gcaps(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gcaps"))
        .args(args)
        .env("GCAPS_OUTPUT_DIR", out)
        .output()
        .expect("gcaps runs")
}

fn with_tiny<'a>(args: &[&'a str]) -> Vec<&'a str> {
    let mut all = args.to_vec();
    all.extend_from_slice(TINY);
    all
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn printed_value(o: &Output, key: &str) -> f64 {
    stdout(o)
        .lines()
        .find_map(|l| l.strip_prefix(key).map(|v| v.trim().parse().unwrap()))
        .unwrap_or_else(|| panic!("no `{key}` line in {}", stdout(o)))
}

#[test]
fn train_writes_outputs_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let first = gcaps(dir.path(), &with_tiny(&["train", "--routing", "alg3", "--seed", "5"]));
    assert!(first.status.success(), "{}", stderr(&first));
    let run = dir.path().join("o-seed5");
    for file in ["checkpoint.gcaps", "metrics.csv", "config.txt"] {
        assert!(run.join(file).exists(), "missing {file}");
    }
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert!(metrics.starts_with("run_id,epoch,split,accuracy,loss,lr,config,wall_seconds,c0,mean_dc\n"));

    let second = gcaps(dir.path(), &with_tiny(&["train", "--routing", "alg3", "--seed", "5"]));
    assert!(second.status.success());
    assert_eq!(std::fs::read_to_string(run.join("metrics.csv")).unwrap(), metrics);

    // the echoed config reproduces the run
    let echo = dir.path().join("echo.cfg");
    std::fs::copy(run.join("config.txt"), &echo).unwrap();
    let third = gcaps(dir.path(), &["train", "--config", echo.to_str().unwrap()]);
    assert!(third.status.success(), "{}", stderr(&third));
    assert_eq!(std::fs::read_to_string(run.join("metrics.csv")).unwrap(), metrics);
}

#[test]
fn eval_reproduces_final_test_accuracy() {
    let dir = tempfile::tempdir().unwrap();
    let train = gcaps(dir.path(), &with_tiny(&["train", "--routing", "alg1"]));
    assert!(train.status.success(), "{}", stderr(&train));
    let run = dir.path().join("b-seed1");
    let metrics = std::fs::read_to_string(run.join("metrics.csv")).unwrap();
    let last_test = metrics.lines().filter(|l| l.split(',').nth(2) == Some("test")).last().unwrap();
    let logged: f64 = last_test.split(',').nth(3).unwrap().parse().unwrap();

    let ckpt = run.join("checkpoint.gcaps");
    let eval = gcaps(dir.path(), &with_tiny(&["eval", "--checkpoint", ckpt.to_str().unwrap()]));
    assert!(eval.status.success(), "{}", stderr(&eval));
    assert_eq!(printed_value(&eval, "accuracy"), logged);
    let confusion = std::fs::read_to_string(dir.path().join("eval/b-seed1-test/confusion.csv")).unwrap();
    assert_eq!(confusion.lines().count(), 11);

    let mismatch = gcaps(
        dir.path(),
        &with_tiny(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--routing", "alg2"]),
    );
    assert_eq!(mismatch.status.code(), Some(2));
    assert!(stderr(&mismatch).contains("routing"), "{}", stderr(&mismatch));
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let typo = gcaps(dir.path(), &["train", "--routting", "alg1"]);
    assert_eq!(typo.status.code(), Some(1));
    assert!(stderr(&typo).contains("routting"));

    let file = dir.path().join("bad.cfg");
    std::fs::write(&file, "# comment\nepochs=1\nroutting=alg1\n").unwrap();
    let from_file = gcaps(dir.path(), &["train", "--config", file.to_str().unwrap()]);
    assert_eq!(from_file.status.code(), Some(1));
    assert!(stderr(&from_file).contains("routting"));

    assert_eq!(gcaps(dir.path(), &[]).status.code(), Some(1));
    assert_eq!(gcaps(dir.path(), &["frobnicate"]).status.code(), Some(1));
    let single = gcaps(dir.path(), &with_tiny(&["compare", "--routing", "alg1"]));
    assert_eq!(single.status.code(), Some(1));
    let few = gcaps(dir.path(), &["routing-report", "--trials", "5"]);
    assert_eq!(few.status.code(), Some(1));
    let no_ckpt = gcaps(dir.path(), &["eval"]);
    assert_eq!(no_ckpt.status.code(), Some(1));
}

#[test]
fn runtime_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bogus = dir.path().join("bogus.gcaps");
    std::fs::write(&bogus, b"not a checkpoint at all").unwrap();
    let corrupt = gcaps(dir.path(), &with_tiny(&["eval", "--checkpoint", bogus.to_str().unwrap()]));
    assert_eq!(corrupt.status.code(), Some(2));
    assert!(stderr(&corrupt).contains("bad checkpoint magic"));

    let missing = gcaps(dir.path(), &["train", "--data-dir", dir.path().join("nowhere").to_str().unwrap()]);
    assert_eq!(missing.status.code(), Some(2));

    // zero-example IDX files
    let images = dir.path().join("empty-images");
    let labels = dir.path().join("empty-labels");
    std::fs::write(&images, [0, 0, 8, 3, 0, 0, 0, 0, 0, 0, 0, 28, 0, 0, 0, 28]).unwrap();
    std::fs::write(&labels, [0, 0, 8, 1, 0, 0, 0, 0]).unwrap();
    let train = gcaps(dir.path(), &with_tiny(&["train"]));
    assert!(train.status.success());
    let ckpt = dir.path().join("b-seed1/checkpoint.gcaps");
    let empty = gcaps(
        dir.path(),
        &[
            "eval",
            "--checkpoint",
            ckpt.to_str().unwrap(),
            "--test-images",
            images.to_str().unwrap(),
            "--test-labels",
            labels.to_str().unwrap(),
        ],
    );
    assert_eq!(empty.status.code(), Some(2), "{}", stderr(&empty));
}

#[test]
fn compare_reports_per_seed_and_mean_columns() {
    let dir = tempfile::tempdir().unwrap();
    let out = gcaps(
        dir.path(),
        &with_tiny(&["compare", "--routing", "alg1,alg2,alg4", "--seeds", "1,2", "--train-limit", "12"]),
    );
    assert!(out.status.success(), "{}", stderr(&out));
    let report = std::fs::read_to_string(dir.path().join("compare/report.csv")).unwrap();
    let lines: Vec<&str> = report.lines().collect();
    assert_eq!(lines.len(), 4);
    assert_eq!(
        lines[0],
        "model,config,synthetic_seed1,synthetic_seed2,synthetic_mean,diverged_seeds"
    );
    for line in &lines[1..] {
        let f: Vec<&str> = line.split(',').collect();
        let (a, b, mean): (f64, f64, f64) = (f[2].parse().unwrap(), f[3].parse().unwrap(), f[4].parse().unwrap());
        assert!((mean - (a + b) / 2.0).abs() < 1e-12);
    }
    assert!(stdout(&out).contains("finding:"));
    assert_eq!(std::fs::read_dir(dir.path().join("compare/curves")).unwrap().count(), 6);
}

#[test]
fn routing_report_defaults_and_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let first = gcaps(dir.path(), &["routing-report", "--trials", "10"]);
    assert!(first.status.success(), "{}", stderr(&first));
    let summary = std::fs::read_to_string(dir.path().join("routing-report/summary.csv")).unwrap();
    let c0: Vec<(String, f64)> = summary
        .lines()
        .skip(1)
        .map(|l| {
            let f: Vec<&str> = l.split(',').collect();
            (f[0].to_string(), f[2].parse().unwrap())
        })
        .collect();
    let expected = [("b", 0.1), ("bc", 1.0 / 1152.0), ("o", 0.1), ("oc", 1.0 / 36.0)];
    assert_eq!(c0.len(), 4);
    for ((label, value), (want_label, want)) in c0.iter().zip(expected) {
        assert_eq!(label, want_label);
        assert_eq!(*value, want);
    }
    let rows = std::fs::read_to_string(dir.path().join("routing-report/routing_report.csv")).unwrap();
    let again = gcaps(dir.path(), &["routing-report", "--trials", "10"]);
    assert!(again.status.success());
    assert_eq!(std::fs::read_to_string(dir.path().join("routing-report/routing_report.csv")).unwrap(), rows);
}

#[test]
fn reconstruct_needs_grouped_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let base = [
        "--dataset",
        "synthetic",
        "--train-limit",
        "10",
        "--test-limit",
        "10",
        "--epochs",
        "1",
        "--batch-size",
        "10",
        "--stem-channels",
        "4",
        "--decoder-hidden1",
        "16",
        "--decoder-hidden2",
        "32",
    ];
    for routing in ["alg4", "alg1"] {
        let mut args = vec!["train", "--routing", routing];
        args.extend_from_slice(&base);
        let out = gcaps(dir.path(), &args);
        assert!(out.status.success(), "{}", stderr(&out));
    }
    let grouped = dir.path().join("oc-seed1/checkpoint.gcaps");
    let mut args = vec!["reconstruct", "--checkpoint", grouped.to_str().unwrap(), "--image-index", "2"];
    args.extend_from_slice(&base);
    let out = gcaps(dir.path(), &args);
    assert!(out.status.success(), "{}", stderr(&out));
    assert!(stdout(&out).starts_with("33 panels"), "{}", stdout(&out));
    let pgm = std::fs::read(dir.path().join("reconstruct/grid_test_2.pgm")).unwrap();
    // 11 x 3 panels of 28x28 with 2-pixel gaps
    let header = b"P5\n328 88\n255\n";
    assert!(pgm.starts_with(header));
    assert_eq!(pgm.len(), header.len() + 328 * 88);

    args[4] = "10";
    let out = gcaps(dir.path(), &args);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("out of range"));

    let ungrouped = dir.path().join("b-seed1/checkpoint.gcaps");
    args[2] = ungrouped.to_str().unwrap();
    args[4] = "0";
    let out = gcaps(dir.path(), &args);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("grouped"), "{}", stderr(&out));
}
