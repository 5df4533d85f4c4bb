use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn fcdd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fcdd"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = fcdd(args);
    assert!(
        out.status.success(),
        "fcdd {args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn tree(root: &Path) -> Vec<(PathBuf, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push((p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn synth_small(dir: &Path, normal: usize, anomalous: usize, seed: u64) {
    ok(&[
        "synth",
        "--out",
        s(dir),
        "--n-normal",
        &normal.to_string(),
        "--n-anomalous",
        &anomalous.to_string(),
        "--seed",
        &seed.to_string(),
        "--size",
        "32x32",
    ]);
}

fn split_counts(manifest: &Path) -> [usize; 3] {
    let text = fs::read_to_string(manifest).unwrap();
    let mut counts = [0; 3];
    for line in text.lines().filter(|l| !l.starts_with('#')).skip(1) {
        let split = line.split('\t').nth(2).unwrap();
        let k = ["train", "calibration", "test"]
            .iter()
            .position(|x| *x == split)
            .unwrap();
        counts[k] += 1;
    }
    counts
}

#[test]
fn synth_writes_requested_files_reproducibly() {
    let t = tempfile::tempdir().unwrap();
    let (a, b) = (t.path().join("a"), t.path().join("b"));
    synth_small(&a, 40, 10, 7);
    synth_small(&b, 40, 10, 7);
    let images = |d: &Path| {
        ["normal", "anomalous"]
            .iter()
            .map(|c| fs::read_dir(d.join(c)).unwrap().count())
            .sum::<usize>()
    };
    assert_eq!(images(&a), 50);
    let strip = |v: Vec<(PathBuf, Vec<u8>)>| {
        v.into_iter()
            .filter(|(p, _)| p != Path::new("config.txt"))
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(tree(&a)), strip(tree(&b)));
}

#[test]
fn synth_to_unwritable_path_fails() {
    let t = tempfile::tempdir().unwrap();
    let blocker = t.path().join("file");
    fs::write(&blocker, b"x").unwrap();
    let out = fcdd(&[
        "synth",
        "--out",
        s(&blocker.join("sub")),
        "--n-normal",
        "2",
        "--n-anomalous",
        "1",
        "--size",
        "32x32",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error"));
}

#[test]
fn split_gives_seven_one_two_and_is_reproducible() {
    let t = tempfile::tempdir().unwrap();
    let data = t.path().join("data");
    synth_small(&data, 100, 0, 3);
    let (r1, r2) = (t.path().join("r1"), t.path().join("r2"));
    for r in [&r1, &r2] {
        ok(&[
            "split",
            "--input",
            s(&data),
            "--ratio",
            "7:1:2",
            "--seed",
            "1",
            "--out",
            s(r),
        ]);
    }
    assert_eq!(split_counts(&r1.join("manifest.tsv")), [70, 10, 20]);
    assert_eq!(
        fs::read(r1.join("manifest.tsv")).unwrap(),
        fs::read(r2.join("manifest.tsv")).unwrap()
    );
    let echoed = fs::read_to_string(r1.join("config.txt")).unwrap();
    assert!(echoed.contains("data.ratio=7:1:2") && echoed.contains("seed=1"));
}

#[test]
fn malformed_ratio_is_a_usage_error() {
    let t = tempfile::tempdir().unwrap();
    let out = fcdd(&["split", "--input", s(t.path()), "--ratio", "7:1", "--out", s(t.path())]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("ratio"));
}

#[test]
fn train_without_manifest_names_the_path() {
    let t = tempfile::tempdir().unwrap();
    let missing = t.path().join("nowhere.tsv");
    let out = fcdd(&[
        "train",
        "--manifest",
        s(&missing),
        "--out",
        s(t.path()),
        "--epochs",
        "0",
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("nowhere.tsv"));
}

#[test]
fn unknown_config_key_is_rejected() {
    let t = tempfile::tempdir().unwrap();
    let out = fcdd(&[
        "--set",
        "train.epoch=3",
        "split",
        "--input",
        s(t.path()),
        "--out",
        s(t.path()),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("train.epoch"));
}

#[test]
fn list_keys_documents_defaults() {
    let out = ok(&["--list-keys"]);
    let text = String::from_utf8(out.stdout).unwrap();
    for key in [
        "train.batch_size",
        "train.epochs",
        "train.learning_rate",
        "heatmap.sigma",
        "data.ratio",
    ] {
        assert!(text.contains(key), "{key} missing");
    }
    let line = |k: &str| {
        text.lines()
            .find(|l| l.starts_with(k))
            .unwrap()
            .split_whitespace()
            .nth(1)
            .unwrap()
            .to_string()
    };
    assert_eq!(line("train.batch_size"), "30");
    assert_eq!(line("train.epochs"), "50");
    assert_eq!(line("train.learning_rate"), "0.0001");
    assert_eq!(line("train.grad_decay"), "0.9");
    assert_eq!(line("train.sq_grad_decay"), "0.99");
}

fn prepared(t: &Path, normal: usize, anomalous: usize) -> PathBuf {
    let data = t.join("data");
    synth_small(&data, normal, anomalous, 5);
    let run = t.join("run");
    ok(&["split", "--input", s(&data), "--seed", "2", "--out", s(&run)]);
    run
}

#[test]
fn zero_epochs_saves_the_initialisation() {
    let t = tempfile::tempdir().unwrap();
    let run = prepared(t.path(), 20, 5);
    ok(&["train", "--out", s(&run), "--epochs", "0", "--input-size", "32x32"]);
    assert!(run.join("checkpoint.bin").is_file());
    let log = fs::read_to_string(run.join("train_log.tsv")).unwrap();
    assert_eq!(log.lines().count(), 1);
    assert!(fs::read_to_string(run.join("config.txt"))
        .unwrap()
        .contains("train.epochs=0"));
}

#[test]
fn pipeline_writes_every_output() {
    let t = tempfile::tempdir().unwrap();
    let run = prepared(t.path(), 40, 10);
    ok(&[
        "train",
        "--out",
        s(&run),
        "--epochs",
        "1",
        "--batch-size",
        "8",
        "--input-size",
        "32x32",
    ]);
    assert_eq!(
        fs::read_to_string(run.join("train_log.tsv")).unwrap().lines().count(),
        2
    );

    ok(&["eval", "--out", s(&run)]);
    let metrics = fs::read_to_string(run.join("metrics.txt")).unwrap();
    let keys: BTreeSet<&str> = metrics
        .lines()
        .filter(|l| !l.starts_with('#') && !l.is_empty())
        .map(|l| l.split_once('=').unwrap().0)
        .collect();
    let expected: BTreeSet<&str> = [
        "auc",
        "f1",
        "precision",
        "recall",
        "threshold",
        "tp",
        "fp",
        "fn",
        "tn",
        "n",
    ]
    .into();
    assert_eq!(keys, expected);
    assert!(run.join("scores.tsv").is_file());
    let hist = fs::read_to_string(run.join("histogram.tsv")).unwrap();
    assert_eq!(hist.lines().count(), 21);

    ok(&[
        "score",
        "--out",
        s(&run),
        "--split",
        "calibration",
        "--threshold",
        "1.0",
    ]);
    let scores = fs::read_to_string(run.join("scores.tsv")).unwrap();
    assert_eq!(scores.lines().count(), 1 + 5);
    assert!(!scores.contains("\tNA"));

    let images = t.path().join("data");
    ok(&[
        "heatmap",
        "--out",
        s(&run),
        "--images",
        s(&images),
        "--sigma",
        "2",
        "--quantile",
        "1.0",
    ]);
    let pngs = fs::read_dir(run.join("heatmaps"))
        .unwrap()
        .filter(|e| e.as_ref().unwrap().path().extension().is_some_and(|x| x == "png"))
        .count();
    assert_eq!(pngs, 50);
    let one = images.join("anomalous").join("anomalous_0000.png");
    ok(&["heatmap", "--out", s(&run), "--images", s(&one), "--underlay"]);
    let img = image::open(run.join("heatmaps").join("anomalous_0000.png")).unwrap();
    assert_eq!((img.width(), img.height()), (32, 32));
}

#[test]
fn echoed_config_reproduces_training() {
    let t = tempfile::tempdir().unwrap();
    let run = prepared(t.path(), 16, 4);
    ok(&[
        "train",
        "--out",
        s(&run),
        "--epochs",
        "1",
        "--batch-size",
        "5",
        "--input-size",
        "32x32",
        "--seed",
        "9",
    ]);
    let again = t.path().join("again");
    fs::create_dir_all(&again).unwrap();
    fs::copy(run.join("manifest.tsv"), again.join("manifest.tsv")).unwrap();
    let cfg = run.join("config.txt");
    ok(&["--config", s(&cfg), "train", "--out", s(&again)]);
    assert_eq!(
        fs::read(run.join("checkpoint.bin")).unwrap(),
        fs::read(again.join("checkpoint.bin")).unwrap()
    );
}

#[test]
fn single_class_test_split_fails_eval() {
    let t = tempfile::tempdir().unwrap();
    let run = prepared(t.path(), 30, 0);
    ok(&["train", "--out", s(&run), "--epochs", "0", "--input-size", "32x32"]);
    let out = fcdd(&["eval", "--out", s(&run), "--threshold", "0.5"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("undefined"));
    assert!(!run.join("metrics.txt").exists());
}

#[test]
fn missing_model_fails_heatmap() {
    let t = tempfile::tempdir().unwrap();
    let out = fcdd(&[
        "heatmap",
        "--model",
        s(&t.path().join("none.bin")),
        "--images",
        s(t.path()),
        "--out",
        s(t.path()),
    ]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("none.bin"));
}
