use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use nalgebra::{DVector, Vector3};
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use locoman::kmp::KmpModel;
use locoman::sim::{SimLog, SimRecord};

fn locoman(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_locoman"))
        .current_dir(dir)
        .args(args)
        .env("LOCOMAN_LOG_LEVEL", "error")
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = locoman(dir, args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn default_config(dir: &Path) -> Value {
    serde_json::from_slice(&ok(dir, &["show-config"]).stdout).unwrap()
}

fn write_config(dir: &Path, name: &str, cfg: &Value) -> PathBuf {
    let p = dir.join(name);
    std::fs::write(&p, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    p
}

fn sha256(path: &Path) -> Vec<u8> {
    Sha256::digest(std::fs::read(path).unwrap()).to_vec()
}

fn record(k: usize) -> SimRecord {
    let v = |o: f64| Vector3::new(o + 0.01 * k as f64, o, -o);
    SimRecord {
        t: k as f64 * 0.001,
        x_d: v(1.0),
        xdot_d: v(0.1),
        x_a: v(1.01),
        xdot_a: v(0.09),
        q_b_d: v(0.5),
        q_b_star: v(0.4),
        q_b_act: v(0.39),
        ee_arm: v(0.6),
        level1_residual: 0.0,
        solve_us: 10.0,
        level2_fallback: false,
        qdot_star: DVector::zeros(10),
        q_star: DVector::zeros(10),
        q_act: DVector::zeros(10),
        qdot_act: DVector::zeros(10),
        tau_a: DVector::zeros(7),
    }
}

#[test]
fn zero_noise_single_demo_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = default_config(dir.path());
    cfg["demos"]["count"] = json!(1);
    cfg["demos"]["generator"]["noise_m"] = json!(0.0);
    let c = write_config(dir.path(), "c.json", &cfg);
    let c = c.to_str().unwrap();
    ok(dir.path(), &["--config", c, "gen-demos", "-o", "a.csv"]);
    ok(dir.path(), &["--config", c, "gen-demos", "-o", "b.csv"]);
    assert_eq!(
        sha256(&dir.path().join("a.csv")),
        sha256(&dir.path().join("b.csv"))
    );
}

#[test]
fn default_corpus_has_five_demos_of_2601_rows() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["--seed", "42", "gen-demos"]);
    let set = locoman::demo::load_csv(dir.path().join("demos.csv")).unwrap();
    assert_eq!(set.demos().len(), 5);
    assert!(set.demos().iter().all(|d| d.samples().len() == 2601));
}

#[test]
fn out_of_order_anchor_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = default_config(dir.path());
    cfg["demos"]["generator"]["anchors"][2]["t"] = json!(10.0);
    let c = write_config(dir.path(), "c.json", &cfg);
    let out = locoman(dir.path(), &["--config", c.to_str().unwrap(), "gen-demos"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("anchor 2"), "{}", stderr(&out));
}

#[test]
fn unknown_config_key_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let c = write_config(
        dir.path(),
        "c.json",
        &json!({"gmm": {"k": 4, "colour": "red"}}),
    );
    let out = locoman(dir.path(), &["--config", c.to_str().unwrap(), "gen-demos"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn flags_override_the_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = ok(
        dir.path(),
        &[
            "--lambda",
            "3",
            "--bandwidth",
            "0.5",
            "--plant",
            "impedance",
            "--seed",
            "7",
            "show-config",
        ],
    );
    let cfg: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(cfg["kmp"]["lambda"], json!(3.0));
    assert_eq!(cfg["kmp"]["bandwidth"], json!(0.5));
    assert_eq!(cfg["plant"]["mode"], json!("impedance"));
    assert_eq!(cfg["gmm"]["seed"], json!(7));
    let bad = locoman(dir.path(), &["--lambda", "-1", "show-config"]);
    assert_eq!(bad.status.code(), Some(2));
}

#[test]
fn learning_is_byte_identical_and_starts_at_the_first_anchor() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen-demos"]);
    ok(dir.path(), &["learn", "-o", "m1.json"]);
    ok(dir.path(), &["learn", "-o", "m2.json"]);
    assert_eq!(
        sha256(&dir.path().join("m1.json")),
        sha256(&dir.path().join("m2.json"))
    );
    let m =
        KmpModel::from_json(&std::fs::read_to_string(dir.path().join("m1.json")).unwrap()).unwrap();
    let p = m.predict_mean(0.0);
    let start = [0.417, 0.062, 1.107];
    for d in 0..3 {
        assert!((p[d] - start[d]).abs() < 0.02, "axis {d}: {}", p[d]);
    }
}

#[test]
fn adaptation_via_json() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen-demos"]);
    ok(dir.path(), &["learn"]);
    std::fs::write(dir.path().join("none.json"), "[]").unwrap();
    ok(
        dir.path(),
        &[
            "adapt",
            "--model",
            "model.json",
            "--via",
            "none.json",
            "-o",
            "same.json",
        ],
    );
    assert_eq!(
        std::fs::read(dir.path().join("model.json")).unwrap(),
        std::fs::read(dir.path().join("same.json")).unwrap()
    );

    let mean = |x: f64| json!([x, 0.5, 1.0, 0.0, 0.0, 0.0, -0.7, 0.7, -0.5]);
    let clash = json!([{"s": 5.0, "mean": mean(0.1)}, {"s": 5.0, "mean": mean(0.2)}]);
    std::fs::write(dir.path().join("clash.json"), clash.to_string()).unwrap();
    let out = locoman(
        dir.path(),
        &[
            "adapt",
            "--model",
            "model.json",
            "--via",
            "clash.json",
            "-o",
            "x.json",
        ],
    );
    assert_eq!(out.status.code(), Some(3));
    let msg = stderr(&out);
    assert!(
        msg.contains("via-points 0") && msg.contains("and 1"),
        "{msg}"
    );
    assert!(!dir.path().join("x.json").exists());
}

#[test]
fn empty_log_cannot_be_evaluated() {
    let dir = tempfile::tempdir().unwrap();
    SimLog::new(0.001)
        .save_csv(&dir.path().join("empty.csv"))
        .unwrap();
    let out = locoman(dir.path(), &["eval", "--log", "empty.csv"]);
    assert_eq!(out.status.code(), Some(3));
    let missing = locoman(dir.path(), &["eval", "--log", "absent.csv"]);
    assert_eq!(missing.status.code(), Some(3));
}

#[test]
fn export_draws_four_panels() {
    let dir = tempfile::tempdir().unwrap();
    let mut log = SimLog::new(0.001);
    for k in 0..3 {
        log.push(record(k));
    }
    log.save_csv(&dir.path().join("tiny.csv")).unwrap();
    ok(
        dir.path(),
        &["export", "--log", "tiny.csv", "-o", "tiny.svg"],
    );
    let svg = std::fs::read_to_string(dir.path().join("tiny.svg")).unwrap();
    assert!(svg.starts_with("<svg"));
    assert_eq!(svg.matches(r#"<g class="panel""#).count(), 4);
}

#[test]
fn replica_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen-demos"]);
    ok(dir.path(), &["learn"]);
    ok(dir.path(), &["simulate"]);
    let out = ok(dir.path(), &["eval", "-o", "summary.json"]);
    let summary: Value = serde_json::from_slice(&out.stdout).unwrap();
    let t = summary["grasp_event"]["t_grasp"].as_f64().unwrap();
    assert!((t - 18.15).abs() <= 0.0005);
    assert_eq!(summary["steps"], json!(26001));
    for block in [
        "ee_position",
        "ee_velocity",
        "base_learned_vs_optimal",
        "base_optimal_vs_actual",
    ] {
        assert_eq!(summary["rmse"][block].as_array().unwrap().len(), 3);
    }
    assert_eq!(summary["constraint_violations"]["violations"], json!(0));
    let saved: Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("summary.json")).unwrap())
            .unwrap();
    assert_eq!(saved, summary);
}

#[test]
fn batch_runs_match_single_runs() {
    let dir = tempfile::tempdir().unwrap();
    ok(dir.path(), &["gen-demos"]);
    ok(dir.path(), &["learn"]);
    let mut cfg = default_config(dir.path());
    cfg["scenario"]["duration"] = json!(3.0);
    cfg["scenario"]["grasp_time"] = json!(1.0);
    let c = write_config(dir.path(), "short.json", &cfg);
    let c = c.to_str().unwrap();
    std::fs::copy(dir.path().join("model.json"), dir.path().join("copy.json")).unwrap();
    ok(dir.path(), &["--config", c, "simulate", "-o", "single.csv"]);
    ok(
        dir.path(),
        &[
            "--config",
            c,
            "simulate",
            "--model",
            "model.json",
            "--model",
            "copy.json",
            "--batch",
            "2",
            "-o",
            "batch.csv",
        ],
    );
    let single = std::fs::read(dir.path().join("single.csv")).unwrap();
    // solve times differ run to run; compare everything else
    let strip = |bytes: Vec<u8>| -> Vec<Vec<String>> {
        let text = String::from_utf8(bytes).unwrap();
        let mut rows = text
            .lines()
            .map(|l| l.split(',').map(str::to_string).collect::<Vec<_>>());
        let header = rows.next().unwrap();
        let col = header.iter().position(|h| h == "solve_us").unwrap();
        rows.map(|mut r| {
            r.remove(col);
            r
        })
        .collect()
    };
    let reference = strip(single);
    for name in ["batch_0.csv", "batch_1.csv"] {
        assert_eq!(
            strip(std::fs::read(dir.path().join(name)).unwrap()),
            reference,
            "{name}"
        );
    }
}
