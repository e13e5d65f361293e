//! Binary-level contract tests: exit codes, artifacts, and option layering.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> &'static str {
    env!("CARGO_BIN_EXE_drnet")
}

fn run(args: &[&str]) -> Output {
    Command::new(bin()).args(args).output().unwrap()
}

fn run_ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed\nstderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("no exit code")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

/// Small corpus plus a one-epoch model to point the read-only commands at.
fn fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let corpus = dir.join("corpus");
    run_ok(&[
        "synth",
        "--out",
        corpus.to_str().unwrap(),
        "--size",
        "32",
        "--per-class",
        "2",
        "--seed",
        "1",
    ]);
    let model = dir.join("model.drn1");
    run_ok(&[
        "train",
        "--arch",
        "18",
        "--data",
        corpus.join("manifest.csv").to_str().unwrap(),
        "--image-size",
        "32",
        "--epochs",
        "1",
        "--batch-size",
        "8",
        "--width-mult",
        "0.0625",
        "--seed",
        "1",
        "--out",
        model.to_str().unwrap(),
    ]);
    (corpus, model)
}

#[test]
fn unknown_arch_exits_2_and_lists_the_variants() {
    let out = run(&["train", "--arch", "99", "--data", "x.csv"]);
    assert_eq!(code(&out), 2);
    let err = stderr(&out);
    for v in ["18", "34", "50", "101", "152"] {
        assert!(err.contains(v), "expected variant list in {err:?}");
    }
}

#[test]
fn missing_manifest_exits_2() {
    let out = run(&[
        "train",
        "--arch",
        "18",
        "--data",
        "/nonexistent/manifest.csv",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn unknown_method_exits_2() {
    let out = run(&[
        "explain",
        "--model",
        "m.drn1",
        "--image",
        "i.ppm",
        "--class",
        "0",
        "--method",
        "sobel",
    ]);
    assert_eq!(code(&out), 2);
}

#[test]
fn corrupt_model_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, _) = fixture(dir.path());
    let bad = dir.path().join("bad.drn1");
    std::fs::write(&bad, b"DRN9 nothing useful").unwrap();
    let out = run(&[
        "eval",
        "--model",
        bad.to_str().unwrap(),
        "--data",
        corpus.join("manifest.csv").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3, "stderr: {}", stderr(&out));
}

#[test]
fn label_out_of_range_exits_3_with_the_line_number() {
    let dir = tempfile::tempdir().unwrap();
    let (_, model) = fixture(dir.path());
    let manifest = dir.path().join("broken.csv");
    std::fs::write(&manifest, "path,label\na.ppm,0\nb.ppm,12\n").unwrap();
    let out = run(&[
        "eval",
        "--model",
        model.to_str().unwrap(),
        "--data",
        manifest.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 3);
    assert!(stderr(&out).contains("line 3"), "stderr: {}", stderr(&out));
}

#[test]
fn empty_manifest_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let (_, model) = fixture(dir.path());
    let manifest = dir.path().join("empty.csv");
    std::fs::write(&manifest, "path,label\n").unwrap();
    let out = run(&[
        "eval",
        "--model",
        model.to_str().unwrap(),
        "--data",
        manifest.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2, "stderr: {}", stderr(&out));
}

#[test]
fn config_file_fills_gaps_but_flags_win() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, _) = fixture(dir.path());
    let cfg = dir.path().join("train.cfg");
    std::fs::write(
        &cfg,
        "# defaults for tiny smoke runs\nepochs=3\nimage-size=32\nwidth-mult=0.0625\nbatch-size=8\n",
    )
    .unwrap();

    let manifest = corpus.join("manifest.csv");
    let epochs_of = |extra: &[&str]| -> usize {
        let model = dir.path().join(format!("m{}.drn1", extra.len()));
        let mut args = vec![
            "--config",
            cfg.to_str().unwrap(),
            "train",
            "--arch",
            "18",
            "--data",
            manifest.to_str().unwrap(),
            "--seed",
            "1",
            "--out",
            model.to_str().unwrap(),
        ];
        args.extend_from_slice(extra);
        run_ok(&args);
        let history =
            std::fs::read_to_string(model.with_extension("history.csv")).unwrap();
        history.lines().count() - 1 // header
    };

    assert_eq!(epochs_of(&[]), 3, "config value should apply");
    assert_eq!(epochs_of(&["--epochs", "1"]), 1, "flag should beat config");
}

#[test]
fn malformed_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "epochs\n").unwrap();
    let out = run(&[
        "--config",
        cfg.to_str().unwrap(),
        "train",
        "--arch",
        "18",
        "--data",
        "x.csv",
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("bad.cfg:1"), "stderr: {}", stderr(&out));
}

#[test]
fn eval_prints_the_table_and_writes_csv() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, model) = fixture(dir.path());
    let csv = dir.path().join("report.csv");
    let out = run_ok(&[
        "eval",
        "--model",
        model.to_str().unwrap(),
        "--data",
        corpus.join("manifest.csv").to_str().unwrap(),
        "--image-size",
        "32",
        "--out",
        csv.to_str().unwrap(),
    ]);
    let table = stdout(&out);
    assert!(table.contains("macro avg"), "table: {table}");
    assert!(table.contains("cataract"));
    let written = std::fs::read_to_string(&csv).unwrap();
    assert!(written.starts_with("class,precision,recall,f1,support\n"));
    assert_eq!(written.lines().count(), 1 + 8, "header + 8 class rows");
}

#[test]
fn compare_prints_deltas_and_parameter_counts() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, model) = fixture(dir.path());
    let dilated = dir.path().join("dilated.drn1");
    run_ok(&[
        "train",
        "--arch",
        "18",
        "--dilated",
        "--data",
        corpus.join("manifest.csv").to_str().unwrap(),
        "--image-size",
        "32",
        "--epochs",
        "1",
        "--batch-size",
        "8",
        "--width-mult",
        "0.0625",
        "--seed",
        "1",
        "--out",
        dilated.to_str().unwrap(),
    ]);
    let out = run_ok(&[
        "compare",
        model.to_str().unwrap(),
        dilated.to_str().unwrap(),
        "--data",
        corpus.join("manifest.csv").to_str().unwrap(),
        "--image-size",
        "32",
    ]);
    let text = stdout(&out);
    assert!(text.contains("delta"), "output: {text}");
    assert!(text.contains("macro-F1"));
    assert!(text.contains("parameters"));
}

#[test]
fn rf_report_contrasts_the_two_geometries() {
    let out = run_ok(&["rf-report", "--arch", "18", "--input", "64"]);
    let text = stdout(&out);
    assert!(text.contains("final receptive field"), "output: {text}");
    assert!(text.contains("dilated"));
    assert!(text.contains("s4.u1.conv1"));
}

#[test]
fn explain_writes_maps_and_unknown_layer_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let (corpus, model) = fixture(dir.path());
    let image = corpus.join("c0_0000.ppm");
    let outdir = dir.path().join("maps");
    run_ok(&[
        "explain",
        "--model",
        model.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "--method",
        "activation",
        "--class",
        "normal",
        "--out",
        outdir.to_str().unwrap(),
    ]);
    assert!(outdir.join("c0_0000.activation.0.pgm").is_file());
    assert!(outdir.join("c0_0000.activation.0.ppm").is_file());

    let out = run(&[
        "explain",
        "--model",
        model.to_str().unwrap(),
        "--image",
        image.to_str().unwrap(),
        "--method",
        "activation",
        "--class",
        "0",
        "--layer",
        "bogus",
        "--out",
        outdir.to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2);
    assert!(stderr(&out).contains("stem"), "stderr should list layers: {}", stderr(&out));
}
