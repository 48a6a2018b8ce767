use std::fs;
use std::path::Path;
use std::process::{Command, Output};

/// Small, fast settings shared by the workflow tests.
const SMALL: &str = r#"
[data]
n_samples = 20
h = 32
w = 32

[model]
base_width = 8
time_embed_dim = 16
srresnet_width = 8
srresnet_blocks = 1

[train]
iters = 50
lr = 1e-3
checkpoint_every = 20
"#;

fn climdiff(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_climdiff"))
        .current_dir(dir)
        .env("RUST_LOG", "warn")
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = climdiff(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn workspace() -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("small.toml"), SMALL).unwrap();
    dir
}

#[test]
fn help_shows_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let train = ok(dir.path(), &["train", "--help"]);
    for want in
        ["[default: 10000]", "[default: 4]", "[default: 2e-5]", "[default: 100]", "[default: out]", "[default: ddpm]"]
    {
        assert!(train.contains(want), "train help lacks {want}:\n{train}");
    }
    let eval = ok(dir.path(), &["evaluate", "--help"]);
    assert!(eval.contains("[default: bilinear,bicubic]") && eval.contains("[default: 4,8]"));
    let top = ok(dir.path(), &["--help"]);
    for cmd in ["gen-data", "train", "sample", "evaluate", "matrix", "report", "check-grad"] {
        assert!(top.contains(cmd));
    }
}

#[test]
fn default_dataset_split_and_hash_are_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let a = ok(dir.path(), &["--out", "a", "gen-data"]);
    let b = ok(dir.path(), &["--out", "b", "gen-data"]);
    assert!(a.contains("530 train / 50 val / 150 test"), "{a}");
    let hash = |s: &str| s.lines().find(|l| l.starts_with("dataset hash")).unwrap().to_string();
    assert_eq!(hash(&a), hash(&b));
    for split in ["train", "val", "test"] {
        let p = |d: &str| fs::read(dir.path().join(d).join("data").join(format!("{split}.cgf"))).unwrap();
        assert_eq!(p("a"), p("b"));
    }
    let c = ok(dir.path(), &["--out", "c", "--seed", "1", "gen-data", "--n-samples", "20"]);
    assert_ne!(hash(&a), hash(&c));
}

#[test]
fn train_resume_and_sample() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["--config", "small.toml", "gen-data"]);

    ok(d, &["--config", "small.toml", "train", "--run-dir", "full"]);
    let full = fs::read_to_string(d.join("full/loss.csv")).unwrap();
    assert_eq!(full.lines().count(), 51);

    ok(d, &["--config", "small.toml", "train", "--run-dir", "split", "--halt-at", "30"]);
    assert_eq!(fs::read_to_string(d.join("split/loss.csv")).unwrap().lines().count(), 31);
    ok(d, &["--config", "small.toml", "train", "--run-dir", "split", "--resume"]);
    assert_eq!(fs::read_to_string(d.join("split/loss.csv")).unwrap(), full);
    assert_eq!(fs::read(d.join("split/model.ckpt")).unwrap(), fs::read(d.join("full/model.ckpt")).unwrap());

    let samples = d.join("out/samples/ddpm-3in1out-x4/samples.cgf");
    ok(d, &["--config", "small.toml", "sample", "--run-dir", "full", "--count", "2"]);
    let first = fs::read(&samples).unwrap();
    ok(d, &["--config", "small.toml", "sample", "--run-dir", "full", "--count", "2"]);
    assert_eq!(first, fs::read(&samples).unwrap());
    let fields = climdiff::field::read_fields(&samples).unwrap();
    assert_eq!(fields.len(), 2);
    assert_eq!((fields[0].height(), fields[0].width()), (32, 32));
    let maps: Vec<_> = fs::read_dir(d.join("out/samples/ddpm-3in1out-x4/maps")).unwrap().collect();
    assert_eq!(maps.len(), 2);
}

#[test]
fn three_target_variant_and_regression_train() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["--config", "small.toml", "gen-data"]);
    ok(d, &["--config", "small.toml", "train", "--io", "3in3out", "--steps", "5"]);
    let state = fs::read_to_string(d.join("out/runs/ddpm-3in3out-x4/state.json")).unwrap();
    assert!(state.contains("\"target_channels\": 3"), "{state}");
    ok(d, &["--config", "small.toml", "train", "--method", "srresnet", "--scale", "8", "--steps", "5"]);
    assert!(d.join("out/runs/srresnet-3in1out-x8/model.ckpt").exists());
}

#[test]
fn interpolation_evaluation_needs_no_checkpoints() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["--config", "small.toml", "gen-data"]);
    let table = ok(d, &["--config", "small.toml", "evaluate"]);
    assert!(table.contains("bicubic"));
    let csv = fs::read_to_string(d.join("out/eval/report.csv")).unwrap();
    assert_eq!(csv.lines().next(), Some("method,io_config,scale,rmse,n"));
    for row in ["bilinear,-,4,", "bilinear,-,8,", "bicubic,-,4,", "bicubic,-,8,"] {
        assert!(csv.contains(row), "{csv}");
    }
    ok(d, &["--config", "small.toml", "evaluate"]);
    assert_eq!(csv, fs::read_to_string(d.join("out/eval/report.csv")).unwrap());
}

#[test]
fn interpolation_matrix_reports_verdicts() {
    let dir = workspace();
    let d = dir.path();
    ok(d, &["--config", "small.toml", "gen-data"]);
    let out = ok(d, &["--config", "small.toml", "matrix", "--methods", "bilinear,bicubic", "--scales", "4"]);
    assert!(out.contains("verdict (a): INCONCLUSIVE"), "{out}");
    let csv = fs::read_to_string(d.join("out/matrix/report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(!d.join("out/matrix/runs").exists());
    let report = ok(d, &["report"]);
    assert!(report.contains("verdict (b)"));
    assert!(fs::read_to_string(d.join("out/matrix/findings.md")).unwrap().contains("verdict (c)"));
}

#[test]
fn exit_codes_and_single_line_errors() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let usage = climdiff(d, &["train", "--no-such-flag"]);
    assert_eq!(usage.status.code(), Some(1));
    let err = String::from_utf8(usage.stderr).unwrap();
    assert!(err.starts_with("error:") && err.trim_end().lines().count() == 1, "{err}");

    assert_eq!(climdiff(d, &["train", "--method", "nonsense"]).status.code(), Some(1));
    assert_eq!(climdiff(d, &[]).status.code(), Some(1));

    let missing = climdiff(d, &["train", "--steps", "1"]);
    assert_eq!(missing.status.code(), Some(2));
    let err = String::from_utf8(missing.stderr).unwrap();
    assert!(err.starts_with("error:") && err.trim_end().lines().count() == 1, "{err}");

    fs::write(d.join("bad.toml"), "[train]\nitres = 3\n").unwrap();
    assert_eq!(climdiff(d, &["--config", "bad.toml", "gen-data"]).status.code(), Some(2));
    assert_eq!(climdiff(d, &["train", "--scale", "3", "--steps", "1"]).status.code(), Some(2));
}
