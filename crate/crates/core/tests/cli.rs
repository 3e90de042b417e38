mod common;

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn diffmark(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffmark"))
        .current_dir(dir)
        .args(args)
        .output()
        .unwrap()
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn usage_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&diffmark(dir.path(), &["no-such-verb"])), 1);
    assert_eq!(code(&diffmark(dir.path(), &["run"])), 1);
    assert_eq!(code(&diffmark(dir.path(), &["run", "--preset", "nope"])), 1);
    fs::write(dir.path().join("bad.yaml"), "name: x\nunknown_key: 1\n").unwrap();
    assert_eq!(code(&diffmark(dir.path(), &["run", "--config", "bad.yaml"])), 1);
    assert_eq!(code(&diffmark(dir.path(), &["--help"])), 0);
}

#[test]
fn stage_failures_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = diffmark(
        dir.path(),
        &["analyze", "--samples", "missing.safetensors", "--codec", "c", "--classifier", "k", "--out", "r"],
    );
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("missing.safetensors"));
}

#[test]
fn verbs_chain_into_a_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let ok = |args: &[&str]| {
        let o = diffmark(d, args);
        assert_eq!(code(&o), 0, "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        String::from_utf8_lossy(&o.stdout).to_string()
    };
    ok(&["synth", "--classes", "3", "--per-class", "12", "--size", "8", "--seed", "2", "--out", "ds.safetensors"]);
    fs::write(d.join("codec.yaml"), serde_yaml::to_string(&common::tiny_codec(4)).unwrap()).unwrap();
    ok(&["train-codec", "--dataset", "ds.safetensors", "--config", "codec.yaml", "--out", "codec.safetensors"]);
    assert!(d.join("codec.metrics.json").exists());
    fs::write(d.join("plan.yaml"), "rules:\n  - selector: {kind: class_equals, class: 1}\n    watermark_index: 2\n").unwrap();
    let marked = ok(&[
        "mark", "--dataset", "ds.safetensors", "--codec", "codec.safetensors", "--plan", "plan.yaml",
        "--manifest", "manifest.json", "--out", "marked.safetensors",
    ]);
    assert!(marked.contains("watermark 2"), "{marked}");
    let cfg = common::tiny_experiment(d);
    fs::write(d.join("diffusion.yaml"), serde_yaml::to_string(&cfg.diffusion).unwrap()).unwrap();
    ok(&["train-diffusion", "--dataset", "marked.safetensors", "--config", "diffusion.yaml", "--out", "denoiser.safetensors"]);
    ok(&["generate", "--model", "denoiser.safetensors", "--n", "10", "--seed", "3", "--out", "gen"]);
    assert!(d.join("gen/samples.seed.json").exists());
    ok(&["train-classifier", "--dataset", "ds.safetensors", "--epochs", "1", "--out", "clf.safetensors"]);
    let summary = ok(&[
        "analyze", "--samples", "gen/samples.safetensors", "--codec", "codec.safetensors", "--classifier",
        "clf.safetensors", "--reference", "ds.safetensors", "--manifest", "manifest.json", "--out", "report",
    ]);
    assert!(summary.contains("fisher wm 2 x class 1"), "{summary}");
    for f in ["report.json", "summary.txt", "histogram.svg", "chi2_by_watermark.svg"] {
        assert!(d.join("report").join(f).exists(), "{f}");
    }
    let again = ok(&["report", "--report", "report/report.json", "--out", "report2"]);
    assert_eq!(again, summary);
    assert_eq!(
        fs::read_to_string(d.join("report/histogram.svg")).unwrap(),
        fs::read_to_string(d.join("report2/histogram.svg")).unwrap()
    );
}
