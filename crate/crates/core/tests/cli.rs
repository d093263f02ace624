use std::path::Path;
use std::process::{Command, Output};

fn verbattr(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_verbattr"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn gradcheck_passes_and_reports_every_component() {
    let dir = tempfile::tempdir().unwrap();
    let o = verbattr(&["gradcheck", "--report", "r.txt"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let report = std::fs::read_to_string(dir.path().join("r.txt")).unwrap();
    assert!(report.contains("all_passed=true"));
    assert_eq!(
        report.lines().filter(|l| l.contains(".passed=")).count(),
        12
    );
    assert!(stdout(&o).ends_with(&report));
}

#[test]
fn corrupted_gradient_fails_with_exit_one() {
    let dir = tempfile::tempdir().unwrap();
    let o = verbattr(&["gradcheck", "--corrupt", "features/joint"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let out = stdout(&o);
    assert!(out.contains("features/joint.passed=false"));
    assert_eq!(out.matches(".passed=false").count(), 1);
}

#[test]
fn bad_input_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = verbattr(
        &[
            "eval-zeroshot",
            "--features",
            "missing.feat",
            "--head",
            "constant",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.feat"));
    let o = verbattr(
        &[
            "train-attributes",
            "--attributes",
            "a",
            "--split",
            "s",
            "--encoder",
            "lstm",
        ],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn zero_shot_report_has_table_and_values() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let synth = verbattr(
        &[
            "synth",
            "--out-dir",
            "data",
            "--classes",
            "16",
            "--test-classes",
            "4",
            "--instances",
            "3",
            "--feature-dim",
            "8",
        ],
        d,
    );
    assert_eq!(synth.status.code(), Some(0));
    let train = verbattr(
        &[
            "train-zeroshot",
            "--features",
            "data/train.feat",
            "--head",
            "attr",
            "--gold-attrs",
            "data/attributes.csv",
            "--epochs",
            "20",
            "--model-out",
            "m.json",
        ],
        d,
    );
    assert_eq!(
        train.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&train.stderr)
    );
    let eval = verbattr(
        &[
            "eval-zeroshot",
            "--features",
            "data/test.feat",
            "--model",
            "m.json",
            "--gold-attrs",
            "data/attributes.csv",
            "--topk",
            "2",
        ],
        d,
    );
    assert_eq!(eval.status.code(), Some(0));
    let out = stdout(&eval);
    let mut lines = out.lines();
    let header: Vec<&str> = lines.next().unwrap().split_whitespace().collect();
    assert_eq!(header, ["model", "top-1", "top-2"]);
    let row = out.lines().nth(2).unwrap();
    assert!(row.starts_with("attr:atts(G)"));
    for cell in row.split_whitespace().skip(1) {
        let (_, frac) = cell.split_once('.').unwrap();
        assert_eq!(frac.len(), 2);
    }
    let top1: f64 = out
        .lines()
        .find_map(|l| l.strip_prefix("top1="))
        .unwrap()
        .parse()
        .unwrap();
    assert!((0.0..=1.0).contains(&top1));
    assert!(out.contains("hubness.skewness="));
}

#[test]
fn eszl_requires_both_regularisers_or_validation() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    verbattr(
        &[
            "synth",
            "--out-dir",
            "data",
            "--classes",
            "12",
            "--test-classes",
            "3",
            "--instances",
            "4",
            "--feature-dim",
            "6",
        ],
        d,
    );
    let o = verbattr(
        &[
            "train-zeroshot",
            "--features",
            "data/train.feat",
            "--head",
            "eszl",
            "--gold-attrs",
            "data/attributes.csv",
            "--gamma",
            "0.1",
            "--model-out",
            "m.json",
        ],
        d,
    );
    assert_eq!(o.status.code(), Some(2));
    let o = verbattr(
        &[
            "train-zeroshot",
            "--features",
            "data/train.feat",
            "--head",
            "eszl",
            "--gold-attrs",
            "data/attributes.csv",
            "--gamma",
            "0.1",
            "--lambda",
            "1",
            "--model-out",
            "m.json",
        ],
        d,
    );
    assert_eq!(o.status.code(), Some(0));
    assert!(stdout(&o).contains("lambda=1\n"));
}
