//! End-to-end checks of the `streid` binary: exit codes, the full
//! synth -> train -> eval pipeline, and seed determinism.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_streid"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn streid")
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

fn write_config(dir: &Path) -> std::path::PathBuf {
    let path = dir.join("train.cfg");
    fs::write(
        &path,
        "image_size = 32\np = 4\nm = 2\nepochs_stage1 = 2\nepochs_stage2 = 2\n",
    )
    .unwrap();
    path
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(run(&["--help"]).status.code(), Some(0));
    assert_eq!(run(&["--version"]).status.code(), Some(0));
    assert_eq!(run(&["train", "--help"]).status.code(), Some(0));
}

#[test]
fn bad_usage_exits_one() {
    // Unknown subcommand and missing required flags are validation failures.
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&["train"]).status.code(), Some(1));
}

#[test]
fn invalid_stage_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = run(&["synth-dataset", "--out", data.to_str().unwrap(), "--ids", "2", "--cameras", "2", "--images-per", "1", "--quiet"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let manifest = data.join("source.jsonl");
    let out = run(&[
        "train",
        "--stage",
        "3",
        "--manifest",
        manifest.to_str().unwrap(),
        "--out",
        dir.path().join("run").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("--stage must be 1 or 2"), "{}", stderr(&out));
}

#[test]
fn missing_checkpoint_exits_one_and_names_path() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.ckpt");
    let out = run(&[
        "eval",
        "--checkpoint",
        missing.to_str().unwrap(),
        "--query-manifest",
        "q.jsonl",
        "--gallery-manifest",
        "g.jsonl",
        "--out",
        dir.path().join("report.json").to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(
        stderr(&out).contains("nope.ckpt"),
        "error must name the missing path: {}",
        stderr(&out)
    );
}

#[test]
fn pipeline_runs_and_is_seed_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let cfg = write_config(dir.path());
    let out = run(&[
        "synth-dataset",
        "--out",
        data.to_str().unwrap(),
        "--ids",
        "4",
        "--cameras",
        "2",
        "--images-per",
        "2",
        "--styles",
        "1",
        "--seed",
        "11",
        "--quiet",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let manifest = data.join("source.jsonl");

    let mut reports = Vec::new();
    for rep in ["a", "b"] {
        let run_dir = dir.path().join(format!("run_{rep}"));
        let log = dir.path().join(format!("log_{rep}.jsonl"));
        let out = run(&[
            "train",
            "--stage",
            "1",
            "--manifest",
            manifest.to_str().unwrap(),
            "--out",
            run_dir.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "3",
            "--log",
            log.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "stage 1: {}", stderr(&out));
        let out = run(&[
            "train",
            "--stage",
            "2",
            "--manifest",
            manifest.to_str().unwrap(),
            "--resume",
            run_dir.join("stage1.ckpt").to_str().unwrap(),
            "--out",
            run_dir.to_str().unwrap(),
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "3",
            "--log",
            log.to_str().unwrap(),
        ]);
        assert!(out.status.success(), "stage 2: {}", stderr(&out));
        let log_text = fs::read_to_string(&log).unwrap();
        assert!(log_text.lines().count() > 0, "log file stayed empty");

        let report = run_dir.join("report.json");
        let out = run(&[
            "eval",
            "--checkpoint",
            run_dir.join("stage2.ckpt").to_str().unwrap(),
            "--query-manifest",
            data.join("target_query.jsonl").to_str().unwrap(),
            "--gallery-manifest",
            data.join("target_gallery.jsonl").to_str().unwrap(),
            "--out",
            report.to_str().unwrap(),
            "--quiet",
        ]);
        assert!(out.status.success(), "eval: {}", stderr(&out));
        reports.push(fs::read_to_string(&report).unwrap());
    }
    // Identical seed, identical bytes.
    assert_eq!(reports[0], reports[1], "same-seed runs diverged");
    let doc: serde_json::Value = serde_json::from_str(&reports[0]).unwrap();
    let map = doc["map"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&map));
    assert!(doc["cmc"].as_array().unwrap().len() > 0);
    assert!(doc["num_queries"].as_u64().unwrap() > 0);
}

#[test]
fn preprocess_and_inspect_spectrum() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = run(&[
        "synth-dataset",
        "--out",
        data.to_str().unwrap(),
        "--ids",
        "2",
        "--cameras",
        "2",
        "--images-per",
        "1",
        "--quiet",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let manifest = data.join("source.jsonl");

    for mode in ["dii", "spi"] {
        let out_dir = dir.path().join(mode);
        let out = run(&[
            "preprocess",
            "--manifest",
            manifest.to_str().unwrap(),
            "--out-dir",
            out_dir.to_str().unwrap(),
            "--mode",
            mode,
            "--size",
            "32",
            "--quiet",
        ]);
        assert!(out.status.success(), "{mode}: {}", stderr(&out));
        assert!(out_dir.join(format!("{mode}.jsonl")).exists());
        assert!(out_dir.join(mode).join("000000.png").exists());
    }
    let out = run(&["preprocess", "--manifest", manifest.to_str().unwrap(), "--out-dir", dir.path().join("x").to_str().unwrap(), "--mode", "bogus"]);
    assert_eq!(out.status.code(), Some(1));

    let png = data.join("source").join("000").join("0_0.png");
    let out = run(&["inspect-spectrum", "--image", png.to_str().unwrap(), "--size", "32"]);
    assert!(out.status.success(), "{}", stderr(&out));
    let doc: serde_json::Value =
        serde_json::from_str(&String::from_utf8_lossy(&out.stdout)).unwrap();
    let f = &doc["energy_fraction"];
    let total =
        f["low"].as_f64().unwrap() + f["causal_mid"].as_f64().unwrap() + f["high"].as_f64().unwrap();
    assert!((total - 1.0).abs() < 1e-9);
}

#[test]
fn make_manifest_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let out = run(&[
        "synth-dataset",
        "--out",
        data.to_str().unwrap(),
        "--ids",
        "3",
        "--cameras",
        "2",
        "--images-per",
        "2",
        "--quiet",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let rebuilt = dir.path().join("rebuilt.jsonl");
    let out = run(&[
        "make-manifest",
        "--root",
        data.join("source").to_str().unwrap(),
        "--split",
        "source",
        "--out",
        rebuilt.to_str().unwrap(),
        "--quiet",
    ]);
    assert!(out.status.success(), "{}", stderr(&out));
    let original = fs::read_to_string(data.join("source.jsonl")).unwrap();
    let rebuilt = fs::read_to_string(&rebuilt).unwrap();
    assert_eq!(
        original.lines().count(),
        rebuilt.lines().count(),
        "rescan found a different record count"
    );
}
