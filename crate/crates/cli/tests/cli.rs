use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_taskflip"))
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(out: &Path, n: &str, seed: &str) -> Output {
    run(&["synth-data", "--out", s(out), "--n", n, "--seed", seed])
}

#[test]
fn help_and_usage_errors() {
    assert_eq!(code(&run(&["--help"])), 0);
    assert_eq!(code(&run(&["--version"])), 0);
    assert_eq!(code(&run(&[])), 1);
    assert_eq!(code(&run(&["frobnicate"])), 1);
    assert_eq!(
        code(&run(&[
            "evaluate",
            "--mode",
            "xx",
            "--manifest",
            "m",
            "--checkpoint",
            "c",
            "--out",
            "o"
        ])),
        1
    );
}

#[test]
fn preset_conflicts_with_explicit_budget() {
    let o = run(&[
        "learn-attack",
        "--manifest",
        "m",
        "--checkpoint",
        "c",
        "--out",
        "o",
        "--preset",
        "strong",
        "--epsilon",
        "0.1",
        "--frames",
        "100",
    ]);
    assert_eq!(code(&o), 1);
    let o = run(&[
        "learn-attack",
        "--manifest",
        "m",
        "--checkpoint",
        "c",
        "--out",
        "o",
        "--epsilon",
        "0.1",
    ]);
    assert_eq!(code(&o), 1);
}

#[test]
fn synth_data_validation_and_reproducibility() {
    let dir = tempfile::tempdir().unwrap();
    let o = synth(&dir.path().join("zero"), "0", "1");
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("at least 1"));
    let o = run(&[
        "synth-data",
        "--out",
        s(&dir.path().join("bad")),
        "--train-fraction",
        "1.5",
    ]);
    assert_eq!(code(&o), 1);

    let (a, b, c) = (
        dir.path().join("a"),
        dir.path().join("b"),
        dir.path().join("c"),
    );
    assert_eq!(code(&synth(&a, "20", "4")), 0);
    assert_eq!(code(&synth(&b, "20", "4")), 0);
    assert_eq!(code(&synth(&c, "20", "5")), 0);
    let read = |d: &Path, f: &str| fs::read(d.join(f)).unwrap();
    assert_eq!(read(&a, "manifest.jsonl"), read(&b, "manifest.jsonl"));
    assert_eq!(read(&a, "wav/utt00003.wav"), read(&b, "wav/utt00003.wav"));
    assert_ne!(read(&a, "wav/utt00003.wav"), read(&c, "wav/utt00003.wav"));
    let manifest = String::from_utf8(read(&a, "manifest.jsonl")).unwrap();
    assert_eq!(manifest.lines().count(), 20);
    assert_eq!(manifest.matches("\"split\":\"test\"").count(), 4);
    let config: serde_json::Value = serde_json::from_slice(&read(&a, "config.json")).unwrap();
    assert_eq!(config["n"], 20);
    assert_eq!(config["seed"], 4);
}

#[test]
fn missing_inputs_are_usage_errors() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(dir.path());
    let o = run(&[
        "gen-targets",
        "--manifest",
        "/nonexistent/m.jsonl",
        "--checkpoint",
        "c.json",
        "--out",
        out,
    ]);
    assert_eq!(code(&o), 1);
    let o = run(&["report", "--out", out]);
    assert_eq!(code(&o), 1);
    let o = run(&[
        "report",
        "--run",
        "/nonexistent/a",
        "/nonexistent/b",
        "--out",
        out,
    ]);
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(
        err.contains("/nonexistent/a") && err.contains("/nonexistent/b"),
        "{err}"
    );
}

#[test]
fn train_attack_evaluate_and_failure_codes() {
    let dir = tempfile::tempdir().unwrap();
    let p = |x: &str| dir.path().join(x);
    assert_eq!(code(&synth(&p("data"), "30", "2")), 0);
    let manifest = p("data/manifest.jsonl");
    let o = run(&[
        "train-toy",
        "--manifest",
        s(&manifest),
        "--out",
        s(&p("model")),
        "--max-steps",
        "30",
        "--min-steps",
        "0",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let ckpt = p("model/model.json");
    assert!(ckpt.is_file());

    let o = run(&[
        "learn-attack",
        "--manifest",
        s(&manifest),
        "--checkpoint",
        s(&ckpt),
        "--preset",
        "weak",
        "--steps",
        "4",
        "--batch-size",
        "4",
        "--checkpoint-every",
        "2",
        "--out",
        s(&p("atk")),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in [
        "segment.f32le",
        "segment.json",
        "trace.jsonl",
        "batches.jsonl",
        "config.json",
        "run.json",
        "targets.jsonl",
    ] {
        assert!(p("atk").join(f).is_file(), "{f}");
    }
    let config: serde_json::Value =
        serde_json::from_slice(&fs::read(p("atk/config.json")).unwrap()).unwrap();
    assert_eq!(config["config"]["epsilon"], 0.02);
    assert_eq!(config["config"]["steps"], 4);
    assert_eq!(config["config"]["preset"], "weak");
    assert_eq!(
        fs::read_to_string(p("atk/trace.jsonl"))
            .unwrap()
            .lines()
            .count(),
        4
    );

    let o = run(&[
        "evaluate",
        "--manifest",
        s(&manifest),
        "--checkpoint",
        s(&ckpt),
        "--segment",
        s(&p("atk/segment")),
        "--out",
        s(&p("ev")),
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(String::from_utf8_lossy(&o.stdout).contains("| WER |"));
    let csv = fs::read_to_string(p("ev/records.csv")).unwrap();
    assert_eq!(csv.lines().count(), 1 + 6);

    let o = run(&[
        "evaluate",
        "--manifest",
        s(&manifest),
        "--checkpoint",
        s(&ckpt),
        "--segment",
        s(&p("nope")),
        "--out",
        s(&p("ev2")),
    ]);
    assert_eq!(code(&o), 1);

    let o = run(&["report", "--run", s(&p("ev")), "--out", s(&p("rep"))]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(fs::read_to_string(p("rep/report.md"))
        .unwrap()
        .contains("## WER decomposition"));
    assert!(p("rep/curves_success.svg").is_file());

    // a corrupt checkpoint is a runtime failure
    fs::write(p("broken.json"), "{not json").unwrap();
    let o = run(&[
        "gen-targets",
        "--manifest",
        s(&manifest),
        "--checkpoint",
        s(&p("broken.json")),
        "--out",
        s(&p("t")),
    ]);
    assert_eq!(code(&o), 2);
}
