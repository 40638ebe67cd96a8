use std::path::Path;
use std::process::{Command, Output};

use chili_core::explain::Sidecar;
use serde_json::Value;

fn chili(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_chili"))
        .args(args)
        .current_dir(dir)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

/// A detection fixture with its calibration already fitted.
fn calibrated(seed: &str) -> tempfile::TempDir {
    let dir = tempfile::tempdir().unwrap();
    let o = chili(dir.path(), &["fixture", "--out-dir", "fx", "--seed", seed]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let o = chili(dir.path(), &["calibrate", "--manifest", "fx/probe.json", "--alpha", "3", "--out", "calib.json"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    dir
}

fn auroc_line(out: &str, name: &str) -> f64 {
    out.lines()
        .find_map(|l| {
            let mut parts = l.split_whitespace();
            (parts.next() == Some(name)).then(|| parts.next().unwrap().parse().unwrap())
        })
        .unwrap_or_else(|| panic!("no {name} line in\n{out}"))
}

#[test]
fn calibration_file_has_one_weight_per_head() {
    let dir = calibrated("1");
    let cal = json(&dir.path().join("calib.json"));
    assert_eq!(cal["L"], 2);
    assert_eq!(cal["H"], 4);
    assert_eq!(cal["model_id"], "fixture-1");
    let rows = cal["weights"].as_array().unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.as_array().unwrap().len() == 4));
    let report = json(&dir.path().join("chili-out/calibrate.json"));
    assert_eq!(report["tool"], "chili");
    assert_eq!(report["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(report["config"]["alpha"], 3.0);
}

#[test]
fn object_component_detects_better_than_raw_score() {
    let dir = calibrated("2");
    let run = |c: &str| {
        let o = chili(
            dir.path(),
            &["detect", "--manifest", "fx/eval.json", "--calibration", "calib.json", "--class", "c1", "--component", c],
        );
        assert_eq!(code(&o), 0);
        auroc_line(&stdout(&o), c)
    };
    let (object, raw) = (run("S_object"), run("S"));
    assert!(object > raw, "{object} vs {raw}");
    let report = json(&dir.path().join("chili-out/detect.json"));
    assert_eq!(report["results"]["auroc"].as_object().unwrap().len(), 1);
    assert!(report["results"]["auroc"]["S"].is_number());
}

#[test]
fn reports_are_byte_identical_across_runs() {
    let dir = calibrated("3");
    let run = |out: &str| {
        let o = chili(
            dir.path(),
            &["segment", "--manifest", "fx/eval.json", "--calibration", "calib.json", "--out-dir", out],
        );
        assert_eq!(code(&o), 0);
        std::fs::read(dir.path().join(out).join("segment.json")).unwrap()
    };
    let (a, b) = (run("a"), run("a2"));
    let (va, vb): (Value, Value) = (serde_json::from_slice(&a).unwrap(), serde_json::from_slice(&b).unwrap());
    assert_eq!(va["results"], vb["results"]);
    assert_eq!(run("a"), a);
}

#[test]
fn inputs_are_left_untouched() {
    let dir = calibrated("4");
    let before: Vec<Vec<u8>> = ["fx/eval.json", "calib.json", "fx/maps/eval-present-000.json"]
        .iter()
        .map(|p| std::fs::read(dir.path().join(p)).unwrap())
        .collect();
    for args in [
        vec!["detect", "--manifest", "fx/eval.json", "--calibration", "calib.json"],
        vec!["segment", "--manifest", "fx/eval.json", "--calibration", "calib.json"],
        vec!["score", "--manifest", "fx/eval.json", "--calibration", "calib.json"],
    ] {
        assert_eq!(code(&chili(dir.path(), &args)), 0);
    }
    let after: Vec<Vec<u8>> = ["fx/eval.json", "calib.json", "fx/maps/eval-present-000.json"]
        .iter()
        .map(|p| std::fs::read(dir.path().join(p)).unwrap())
        .collect();
    assert_eq!(before, after);
    let o = chili(dir.path(), &["calibrate", "--manifest", "fx/probe.json", "--out", "fx/probe.json"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn mismatched_model_id_is_refused() {
    let dir = calibrated("5");
    let o = chili(dir.path(), &["fixture", "--out-dir", "other", "--seed", "6"]);
    assert_eq!(code(&o), 0);
    let o = chili(dir.path(), &["detect", "--manifest", "other/eval.json", "--calibration", "calib.json"]);
    assert_eq!(code(&o), 1);
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("fixture-5") && err.contains("fixture-6"), "{err}");
}

#[test]
fn exit_codes_follow_the_failure_kind() {
    let dir = tempfile::tempdir().unwrap();
    let o = chili(dir.path(), &["detect", "--frobnicate"]);
    assert_eq!(code(&o), 1);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(code(&chili(dir.path(), &["--help"])), 0);
    assert_eq!(code(&chili(dir.path(), &["--version"])), 0);
    let o = chili(dir.path(), &["detect", "--manifest", "missing.json", "--calibration", "c.json"]);
    assert_eq!(code(&o), 1);

    let dir = calibrated("7");
    let o = chili(dir.path(), &["calibrate", "--manifest", "fx/probe.json", "--alpha", "-1"]);
    assert_eq!(code(&o), 1);
    // The report directory is a regular file, so writing the report fails.
    std::fs::write(dir.path().join("blocker"), "x").unwrap();
    let o = chili(
        dir.path(),
        &["segment", "--manifest", "fx/eval.json", "--calibration", "calib.json", "--out-dir", "blocker"],
    );
    assert_eq!(code(&o), 2, "{}", String::from_utf8_lossy(&o.stderr));
    let o = Command::new(env!("CARGO_BIN_EXE_chili"))
        .args(["fixture", "--out-dir", "x"])
        .current_dir(dir.path())
        .env("CHILI_WORKERS", "zero")
        .output()
        .unwrap();
    assert_eq!(code(&o), 1);
}

#[test]
fn triplet_reports_every_scenario() {
    let dir = calibrated("8");
    let o = chili(
        dir.path(),
        &["triplet", "--manifest", "fx/eval.json", "--calibration", "calib.json", "--scenario", "c1:c2:k",
          "--samples", "6", "--component", "S_object", "--seed", "3"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&dir.path().join("chili-out/triplet.json"));
    let s = &r["results"]["scenarios"][0];
    assert_eq!(s["failure_rate"], 0.0);
    assert_eq!(s["means"].as_array().unwrap().len(), 3);
    assert_eq!(r["results"]["mean_failure_rate"], 0.0);
    let o = chili(dir.path(), &["triplet", "--manifest", "fx/eval.json", "--scenario", "c1:c2:k", "--samples", "6", "--component", "S_object"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn concept_bottleneck_and_explanations() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert_eq!(code(&chili(d, &["fixture", "--out-dir", "cb", "--seed", "2", "--kind", "cbm"])), 0);
    assert_eq!(code(&chili(d, &["calibrate", "--manifest", "cb/probe.json", "--out", "cal.json"])), 0);
    let eval = json(&d.join("cb/eval.json"));
    let samples = eval["samples"].as_array().unwrap();
    let half = samples.len() / 2;
    for (name, part) in [("train", &samples[..half]), ("test", &samples[half..])] {
        let m = serde_json::json!({"grid": eval["grid"], "samples": part});
        std::fs::write(d.join(format!("cb/{name}.json")), m.to_string()).unwrap();
    }
    let train = |component: &str, model: &str| {
        let o = chili(
            d,
            &["cbm-train", "--manifest", "cb/train.json", "--test-manifest", "cb/test.json", "--calibration", "cal.json",
              "--component", component, "--model-out", model],
        );
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        json(&d.join("chili-out/cbm-train.json"))["results"]["test"]["accuracy"].as_f64().unwrap()
    };
    let (object, raw) = (train("S_object", "obj.json"), train("S", "raw.json"));
    assert!(object >= raw, "{object} vs {raw}");
    let model = json(&d.join("obj.json"));
    for key in ["classes", "concepts", "weights", "bias", "component", "hyper"] {
        assert!(model.get(key).is_some(), "model file lacks {key}");
    }

    let o = chili(
        d,
        &["explain", "--cbm", "obj.json", "--manifest", "cb/test.json", "--calibration", "cal.json", "--top-k", "2"],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let first = d.join("chili-out/explain/0000");
    let sidecar = Sidecar::load(first.join("explanation.json")).unwrap();
    assert_eq!(sidecar.concepts.len(), 2);
    let report = json(&d.join("chili-out/explain.json"));
    let top: Vec<chili_core::explain::RankedConcept> =
        serde_json::from_value(report["results"][0]["top"].clone()).unwrap();
    assert_eq!(sidecar.ranking(), top);
    for e in &sidecar.concepts {
        let bytes = std::fs::read(first.join(&e.file)).unwrap();
        assert!(bytes.starts_with(b"P5"));
    }
    let o = chili(d, &["explain", "--cbm", "obj.json", "--manifest", "cb/test.json", "--calibration", "cal.json", "--top-k", "9"]);
    assert_eq!(code(&o), 1);
}

#[test]
fn selftest_prints_pass_lines() {
    let dir = tempfile::tempdir().unwrap();
    let o = chili(dir.path(), &["selftest", "--sweep", "3"]);
    assert_eq!(code(&o), 0, "{}", stdout(&o));
    let out = stdout(&o);
    assert!(out.lines().filter(|l| l.starts_with("PASS ")).count() >= 8, "{out}");
    let report = json(&dir.path().join("chili-selftest/selftest.json"));
    assert_eq!(report["results"]["failed"], 0);
    assert!(report["model_id"].is_null());
}
