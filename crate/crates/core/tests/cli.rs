use std::path::Path;
use std::process::{Command, Output};

use semfield::pipeline::PipelineConfig;

const SUBCOMMANDS: [&str; 11] = [
    "synth",
    "associate",
    "train-codebook",
    "index",
    "train-field",
    "render",
    "query",
    "segment",
    "edit",
    "eval",
    "ablate",
];

fn semfield(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_semfield")).current_dir(dir).env("SEMFIELD_THREADS", "2").args(args).output().unwrap()
}

fn is_empty_dir(dir: &Path) -> bool {
    std::fs::read_dir(dir).unwrap().next().is_none()
}

#[test]
fn help_exits_zero_for_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in SUBCOMMANDS {
        let out = semfield(dir.path(), &[cmd, "--help"]);
        assert_eq!(out.status.code(), Some(0), "{cmd}");
        assert!(!out.stdout.is_empty(), "{cmd}");
    }
    assert!(is_empty_dir(dir.path()));
}

#[test]
fn usage_errors_exit_two_and_write_nothing() {
    let dir = tempfile::tempdir().unwrap();
    for args in [&["synth", "--bogus"][..], &["render", "--scale", "xl"], &["edit", "--phrase", "mug"], &["nope"]] {
        let out = semfield(dir.path(), args);
        assert_eq!(out.status.code(), Some(2), "{args:?}");
    }
    assert!(is_empty_dir(dir.path()));
}

#[test]
fn stage_errors_are_reported_as_json() {
    let dir = tempfile::tempdir().unwrap();
    let out = semfield(dir.path(), &["train-codebook"]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(&out.stderr).unwrap();
    assert!(err["error"].is_string() && err["message"].is_string(), "{err}");
}

#[test]
fn smoke_run_produces_a_scored_report() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = PipelineConfig::default();
    cfg.ccl.steps = 100;
    cfg.field.iterations = 100;
    let config = dir.path().join("small.toml");
    std::fs::write(&config, cfg.to_toml()).unwrap();
    let config = config.to_str().unwrap();

    for args in [
        &["--config", config, "synth", "--k", "4", "--views", "8", "--seed", "7"][..],
        &["--config", config, "train-codebook"],
        &["--config", config, "eval"],
    ] {
        let out = semfield(dir.path(), args);
        assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }

    let report: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("report/report.json")).unwrap()).unwrap();
    let miou = report[0]["miou"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&miou));
    assert!(dir.path().join("report/metrics.csv").is_file());

    let phrases = semfield::synth::GroundTruth::load(&dir.path().join("data/ground_truth.json")).unwrap().phrases;
    let out = semfield(dir.path(), &["segment", "--phrase", &phrases[0]]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let out = semfield(dir.path(), &["query", "--phrase", "no such thing"]);
    assert_eq!(out.status.code(), Some(1));
}
