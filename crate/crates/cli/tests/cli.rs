use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn run(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_collapsekit")).current_dir(dir).args(args).output().unwrap()
}

fn write_run(dir: &Path) {
    let mut log = String::new();
    for step in 1..=100u64 {
        let loss = 2.0 + 3.0 / (step as f64).sqrt();
        log.push_str(&format!("{{\"step\": {step}, \"loss\": {loss}}}\n"));
    }
    fs::write(dir.join("run.jsonl"), log).unwrap();
    fs::write(
        dir.join("run.config.json"),
        r#"{"run_id": "run", "eta": 0.001, "lambda": 0.1, "batch_tokens": 1000, "dataset_tokens": 100000,
            "params": 5000, "schedule": {"kind": "linear_decay", "warmup_frac": 0.1, "decay_ratio": 0.0}}"#,
    )
    .unwrap();
}

#[test]
fn normalize_prints_collapse_csv() {
    let dir = tempfile::tempdir().unwrap();
    write_run(dir.path());
    let out =
        run(dir.path(), &["--smooth-window", "1", "normalize", "--in", "run.jsonl", "--config", "run.config.json"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some("t_hat,ell"));
    let rows: Vec<(f64, f64)> = lines
        .map(|l| {
            let (t, v) = l.split_once(',').unwrap();
            (t.parse().unwrap(), v.parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 100);
    assert_eq!(*rows.last().unwrap(), (1.0, 1.0));
    let expected = (2.0 + 3.0) / (2.0 + 0.3);
    assert!((rows[0].1 - expected).abs() < 1e-12);
}

#[test]
fn unknown_flag_exits_one_with_usage() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["normalize", "--bogus"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));
}

#[test]
fn missing_input_is_an_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run(dir.path(), &["normalize", "--in", "nope.jsonl", "--total-steps", "10"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));
}

#[test]
fn synth_fit_rank_recovers_true_winner() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("spec.json"),
        r#"{"kind": "crossing_sweep",
            "params": {"runs": [{"run_id": "x", "tau": 1.0, "final_loss": 2.3},
                                {"run_id": "y", "tau": 0.3, "final_loss": 2.25},
                                {"run_id": "z", "tau": 0.1, "final_loss": 2.4}]},
            "noise": {"kind": "multiplicative", "sigma": 0.002}, "seed": 3}"#,
    )
    .unwrap();
    assert!(run(d, &["synth", "--spec", "spec.json", "--out", "corpus"]).status.success());
    let fit = run(d, &["fit", "--manifest", "corpus/manifest.json", "--out", "fit.json"]);
    assert!(fit.status.success(), "{}", String::from_utf8_lossy(&fit.stderr));

    for id in ["x", "y", "z"] {
        let text = fs::read_to_string(d.join(format!("corpus/{id}.jsonl"))).unwrap();
        let head: String = text.lines().take(700).map(|l| format!("{l}\n")).collect();
        fs::write(d.join(format!("corpus/p_{id}.jsonl")), head).unwrap();
    }
    fs::write(
        d.join("corpus/partial.json"),
        r#"{"entries": [
            {"curve_path": "p_x.jsonl", "config_path": "x.config.json", "run_id": "x"},
            {"curve_path": "p_y.jsonl", "config_path": "y.config.json", "run_id": "y"},
            {"curve_path": "p_z.jsonl", "config_path": "z.config.json", "run_id": "z"}]}"#,
    )
    .unwrap();
    let rank = run(d, &["rank", "--manifest", "corpus/partial.json", "--fit", "fit.json"]);
    assert!(rank.status.success(), "{}", String::from_utf8_lossy(&rank.stderr));
    let decision: serde_json::Value = serde_json::from_slice(&rank.stdout).unwrap();
    let truth: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(d.join("corpus/truth.json")).unwrap()).unwrap();
    assert_eq!(decision["chosen"], truth["best_run_id"]);
    assert_eq!(decision["chosen"], "y");
}

#[test]
fn monitor_exits_two_on_alert() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(
        d.join("spec.json"),
        r#"{"kind": "fault_ramp",
            "params": {"run_id": "f", "total_steps": 2000, "onset": 0.6, "magnitude": 0.05}, "seed": 0}"#,
    )
    .unwrap();
    fs::write(
        d.join("clean.json"),
        r#"{"kind": "predictor_curve", "params": {"run_id": "c", "total_steps": 2000}, "seed": 0}"#,
    )
    .unwrap();
    assert!(run(d, &["synth", "--spec", "spec.json", "--out", "f"]).status.success());
    assert!(run(d, &["synth", "--spec", "clean.json", "--out", "c"]).status.success());
    let norm = run(d, &["normalize", "--in", "c/c.jsonl", "--config", "c/c.config.json", "--out", "ref.csv"]);
    assert!(norm.status.success(), "{}", String::from_utf8_lossy(&norm.stderr));
    let out = run(d, &["monitor", "--log", "f/f.jsonl", "--reference", "ref.csv", "--config", "f/f.config.json"]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    let events: Vec<serde_json::Value> =
        String::from_utf8(out.stdout).unwrap().lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert!(events.iter().any(|e| e["type"] == "alert"));
}
