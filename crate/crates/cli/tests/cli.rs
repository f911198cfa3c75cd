//! Black-box tests of the `pixie` binary: help output, machine-readable
//! errors, atomic output staging, config/flag precedence, and the
//! predict-then-evaluate self-consistency loop on a noiseless scene.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn pixie(work: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pixie"))
        .current_dir(work)
        .env_remove("PIXIE_THREADS")
        .args(args)
        .output()
        .expect("spawn pixie")
}

fn stdout_json(out: &Output) -> Value {
    let text = String::from_utf8_lossy(&out.stdout);
    serde_json::from_str(text.trim()).unwrap_or_else(|e| {
        panic!("stdout is not JSON ({e}): {text:?}");
    })
}

fn stderr_error(out: &Output) -> (String, String) {
    let text = String::from_utf8_lossy(&out.stderr);
    let v: Value = serde_json::from_str(text.trim())
        .unwrap_or_else(|e| panic!("stderr is not JSON ({e}): {text:?}"));
    let err = &v["error"];
    (
        err["code"].as_str().expect("error.code").to_string(),
        err["message"].as_str().expect("error.message").to_string(),
    )
}

fn assert_success(out: &Output, what: &str) {
    assert!(
        out.status.success(),
        "{what} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
}

/// A two-part, zero-noise scene with degenerate material ranges: features
/// determine part and material exactly, so a trained predictor must
/// classify it perfectly.
const NOISELESS_SPEC: &str = r#"{
  "seed": 9,
  "feature_dim": 4,
  "noise": 0.0,
  "parts": [
    {
      "name": "base",
      "shape": { "kind": "box", "min": [0.0, 0.0, 0.0], "max": [1.0, 1.0, 0.26] },
      "mean": [1.0, 0.0, 0.0, 0.0]
    },
    {
      "name": "top",
      "shape": { "kind": "box", "min": [0.0, 0.0, 0.5], "max": [1.0, 1.0, 0.76] },
      "mean": [0.0, 1.0, 0.0, 0.0]
    }
  ],
  "materials": {
    "parts": {
      "base": { "class": "elastic", "E": [1e4, 1e4], "nu": [0.3, 0.3], "density": [200.0, 200.0] },
      "top": { "class": "metal", "E": [5e9, 5e9], "nu": [0.3, 0.3], "density": [2700.0, 2700.0] }
    },
    "constraints": []
  }
}"#;

fn write_noiseless_scene(work: &Path) {
    fs::write(work.join("scene.json"), NOISELESS_SPEC).unwrap();
    let out = pixie(
        work,
        &[
            "synth",
            "--spec",
            "scene.json",
            "--n",
            "8",
            "--out-dir",
            "data/scene0",
        ],
    );
    assert_success(&out, "synth");
}

#[test]
fn help_lists_subcommands_and_flags() {
    let work = TempDir::new().unwrap();
    let out = pixie(work.path(), &["--help"]);
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    for needle in [
        "synth", "segment", "sample", "paint", "train", "predict", "sim", "eval",
        "--config", "--threads", "--deterministic",
    ] {
        assert!(text.contains(needle), "--help is missing {needle:?}:\n{text}");
    }

    // Every subcommand must enumerate its own flags.
    let per_command: &[(&[&str], &[&str])] = &[
        (&["synth"], &["--spec", "--out-dir", "--n", "--seed", "--occupancy-features"]),
        (&["segment"], &["--features", "--mask", "--queries", "--out"]),
        (&["sample"], &["--spec", "--seed", "--max-tries", "--out"]),
        (&["paint"], &["--labels", "--samples", "--queries", "--out-class", "--out-params"]),
        (
            &["train"],
            &["--data-dir", "--out", "--loss-csv", "--epochs", "--learning-rate", "--hidden", "--lambda", "--seed"],
        ),
        (&["predict"], &["--model", "--features", "--mask", "--out-pred", "--out-class", "--out-params"]),
        (
            &["sim"],
            &["--class", "--params", "--pred", "--mask", "--out", "--ply-dir", "--csv", "--frames", "--dt", "--gravity", "--wind", "--seed"],
        ),
        (&["eval", "pred"], &["--pred", "--class", "--params", "--mask", "--out"]),
        (&["eval", "traj"], &["--traj", "--reference", "--out", "--csv"]),
        (&["eval", "aggregate"], &["--input", "--out", "--csv"]),
    ];
    for (cmd, flags) in per_command {
        let mut args: Vec<&str> = cmd.to_vec();
        args.push("--help");
        let out = pixie(work.path(), &args);
        assert!(out.status.success(), "{cmd:?} --help failed");
        let text = String::from_utf8_lossy(&out.stdout);
        for flag in *flags {
            assert!(text.contains(flag), "{cmd:?} --help is missing {flag}:\n{text}");
        }
    }
}

#[test]
fn runtime_errors_are_machine_readable_json() {
    let work = TempDir::new().unwrap();
    let out = pixie(
        work.path(),
        &[
            "segment",
            "--features", "missing.pxgrid",
            "--mask", "missing.pxgrid",
            "--queries", "missing.json",
            "--out", "labels.pxgrid",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    let (code, message) = stderr_error(&out);
    assert_eq!(code, "io");
    assert!(message.contains("missing"), "unhelpful message: {message}");
    assert!(out.stdout.is_empty(), "failed command printed a summary");
}

#[test]
fn usage_errors_exit_2_with_usage_code() {
    let work = TempDir::new().unwrap();
    let out = pixie(work.path(), &["synth", "--no-such-flag"]);
    assert_eq!(out.status.code(), Some(2));
    let (code, _) = stderr_error(&out);
    assert_eq!(code, "usage");

    // Mutually exclusive material sources for sim are rejected by parsing.
    let out = pixie(
        work.path(),
        &[
            "sim",
            "--class", "a.pxgrid",
            "--params", "b.pxgrid",
            "--pred", "c.pxgrid",
            "--mask", "d.pxgrid",
            "--out", "t.pxframe",
        ],
    );
    assert_eq!(out.status.code(), Some(2));
    let (code, _) = stderr_error(&out);
    assert_eq!(code, "usage");
}

#[test]
fn unknown_config_keys_are_rejected() {
    let work = TempDir::new().unwrap();
    fs::write(work.path().join("bad.json"), r#"{ "trian": { "epochs": 3 } }"#).unwrap();
    let out = pixie(
        work.path(),
        &["--config", "bad.json", "sample", "--out", "s.json"],
    );
    assert_eq!(out.status.code(), Some(1));
    let (code, message) = stderr_error(&out);
    assert_eq!(code, "json");
    assert!(message.contains("trian"), "message should name the bad key: {message}");
}

#[test]
fn failed_commands_leave_no_partial_outputs() {
    let work = TempDir::new().unwrap();
    write_noiseless_scene(work.path());
    fs::write(
        work.path().join("queries.json"),
        r#"{ "parts": [
            { "name": "base", "embedding": [1.0, 0.0, 0.0, 0.0] },
            { "name": "top", "embedding": [0.0, 1.0, 0.0, 0.0] }
        ] }"#,
    )
    .unwrap();
    let out = pixie(
        work.path(),
        &[
            "segment",
            "--features", "data/scene0/features.pxgrid",
            "--mask", "data/scene0/occupancy.pxgrid",
            "--queries", "queries.json",
            "--out", "seg.pxgrid",
        ],
    );
    assert_success(&out, "segment");

    // Painting with a sample file that lacks one declared part fails after
    // the inputs are read; its outputs must not appear, not even empty.
    fs::write(
        work.path().join("short_samples.json"),
        r#"{ "base": { "class": "elastic", "E": 1e4, "nu": 0.3, "density": 200.0 } }"#,
    )
    .unwrap();
    let out = pixie(
        work.path(),
        &[
            "paint",
            "--labels", "seg.pxgrid",
            "--samples", "short_samples.json",
            "--queries", "queries.json",
            "--out-class", "painted_class.pxgrid",
            "--out-params", "painted_params.pxgrid",
        ],
    );
    assert_eq!(out.status.code(), Some(1));
    let (code, message) = stderr_error(&out);
    assert_eq!(code, "input");
    assert!(message.contains("top"), "message should name the missing part: {message}");
    assert!(!work.path().join("painted_class.pxgrid").exists());
    assert!(!work.path().join("painted_params.pxgrid").exists());
    // No stray temp files left behind either.
    let leftovers: Vec<_> = fs::read_dir(work.path())
        .unwrap()
        .filter_map(|e| e.ok())
        .map(|e| e.file_name().to_string_lossy().into_owned())
        .filter(|name| name.starts_with(".pixie-tmp."))
        .collect();
    assert!(leftovers.is_empty(), "staging temps leaked: {leftovers:?}");
}

#[test]
fn flags_override_config_keys() {
    let work = TempDir::new().unwrap();
    write_noiseless_scene(work.path());
    fs::write(
        work.path().join("config.json"),
        r#"{ "train": { "epochs": 7, "learning_rate": 1e-4, "hidden": 8, "seed": 1 } }"#,
    )
    .unwrap();

    let out = pixie(
        work.path(),
        &[
            "--config", "config.json",
            "train",
            "--data-dir", "data",
            "--out", "m_config.pxmodel",
        ],
    );
    assert_success(&out, "train with config epochs");
    let summary = stdout_json(&out);
    assert_eq!(summary["epochs_run"], 7, "config epochs not honored: {summary}");

    let out = pixie(
        work.path(),
        &[
            "--config", "config.json",
            "train",
            "--data-dir", "data",
            "--out", "m_flag.pxmodel",
            "--epochs", "2",
        ],
    );
    assert_success(&out, "train with flag epochs");
    let summary = stdout_json(&out);
    assert_eq!(summary["epochs_run"], 2, "flag did not override config: {summary}");
}

#[test]
fn predict_then_eval_is_self_consistent_on_a_noiseless_scene() {
    let work = TempDir::new().unwrap();
    write_noiseless_scene(work.path());

    let out = pixie(
        work.path(),
        &[
            "train",
            "--data-dir", "data",
            "--out", "model.pxmodel",
            "--epochs", "150",
            "--hidden", "16",
            "--learning-rate", "0.5",
            "--seed", "3",
        ],
    );
    assert_success(&out, "train");

    let out = pixie(
        work.path(),
        &[
            "predict",
            "--model", "model.pxmodel",
            "--features", "data/scene0/features.pxgrid",
            "--mask", "data/scene0/occupancy.pxgrid",
            "--out-pred", "pred.pxgrid",
        ],
    );
    assert_success(&out, "predict");

    // Evaluating against the very grids the prediction was trained from
    // must yield perfect classification on this separable, noiseless scene.
    let out = pixie(
        work.path(),
        &[
            "eval", "pred",
            "--pred", "pred.pxgrid",
            "--class", "data/scene0/material_class.pxgrid",
            "--params", "data/scene0/material_params.pxgrid",
            "--mask", "data/scene0/occupancy.pxgrid",
        ],
    );
    assert_success(&out, "eval pred");
    let metrics = stdout_json(&out);
    assert_eq!(metrics["mat_acc"], 1.0, "imperfect classification: {metrics}");
}

#[test]
fn same_seed_synth_is_bitwise_reproducible() {
    let work = TempDir::new().unwrap();
    fs::write(work.path().join("scene.json"), NOISELESS_SPEC).unwrap();
    for dir in ["a", "b"] {
        let out = pixie(
            work.path(),
            &[
                "--deterministic",
                "synth",
                "--spec", "scene.json",
                "--n", "8",
                "--seed", "11",
                "--out-dir", dir,
            ],
        );
        assert_success(&out, "synth");
    }
    for name in [
        "features.pxgrid",
        "density.pxgrid",
        "occupancy.pxgrid",
        "labels.pxgrid",
        "material_class.pxgrid",
        "material_params.pxgrid",
        "palette.json",
    ] {
        let a = fs::read(work.path().join("a").join(name)).unwrap();
        let b = fs::read(work.path().join("b").join(name)).unwrap();
        assert_eq!(a, b, "{name} differs between identical seeds");
    }
}
