use std::path::Path;
use std::process::{Command, Output};

fn shdp(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shdp"))
        .args(args)
        .current_dir(cwd)
        .output()
        .expect("binary runs")
}

#[test]
fn synth_fit_decode_report_eval() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = shdp(
        &[
            "synth", "persist3", "--out", "data", "--length", "300", "--seed", "4",
        ],
        d,
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    for f in ["features.txt", "labels.txt", "run.toml", "scenario.json"] {
        assert!(d.join("data").join(f).is_file(), "{f}");
    }

    // the decode command needs label snapshots in the traces
    let cfg = d.join("data/run.toml");
    let mut text = std::fs::read_to_string(&cfg).unwrap();
    text = text.replace("[trace]\nz_every = 0", "[trace]\nz_every = 50");
    std::fs::write(&cfg, text).unwrap();
    let out = shdp(
        &[
            "fit",
            "data/run.toml",
            "--chains",
            "2",
            "--sweeps",
            "200",
            "--L",
            "10",
            "--seed",
            "9",
        ],
        d,
    );
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let metrics: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert!(metrics["der"].as_f64().unwrap() < 0.3);
    let run = d.join("data/run");
    let saved = std::fs::read_to_string(run.join("config.toml")).unwrap();
    assert!(saved.contains("L = 10") && saved.contains("seed = 9"));

    let out = shdp(&["decode", "data/run", "--labels", "decoded.txt"], d);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let segments = String::from_utf8(out.stdout).unwrap();
    assert_eq!(
        segments,
        std::fs::read_to_string(run.join("decoded.segments")).unwrap()
    );

    let out = shdp(&["report", "data/run"], d);
    assert!(out.status.success());
    assert!(run.join("report/hamming_quantiles.tsv").is_file());

    let out = shdp(&["eval", "data/labels.txt", "decoded.txt"], d);
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["frames"], 300);
    assert!((v["hamming"].as_f64().unwrap() - v["der"].as_f64().unwrap()).abs() < 1e-12);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(shdp(&["--help"], d).status.code(), Some(0));
    assert_eq!(shdp(&["bogus"], d).status.code(), Some(1));
    assert_eq!(shdp(&["fit", "missing.toml"], d).status.code(), Some(1));
    assert_eq!(shdp(&["synth", "nope"], d).status.code(), Some(1));
    std::fs::write(d.join("a.txt"), "0\n1\n").unwrap();
    std::fs::write(d.join("b.txt"), "0\n").unwrap();
    assert_eq!(shdp(&["eval", "a.txt", "b.txt"], d).status.code(), Some(1));

    // constant features leave no empirical variance for the prior scale
    let out = shdp(&["synth", "persist3", "--out", "data", "--length", "50"], d);
    assert!(out.status.success());
    std::fs::write(d.join("data/features.txt"), "1\n".repeat(50)).unwrap();
    let out = shdp(&["fit", "data/run.toml", "--sweeps", "2"], d);
    assert_eq!(
        out.status.code(),
        Some(1),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn symbol_presets_write_symbol_streams() {
    let dir = tempfile::tempdir().unwrap();
    let out = shdp(
        &["synth", "multi5", "--out", "m", "--length", "100"],
        dir.path(),
    );
    assert!(out.status.success());
    let out = shdp(&["fit", "m/run.toml", "--sweeps", "20"], dir.path());
    assert!(
        out.status.success(),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}
