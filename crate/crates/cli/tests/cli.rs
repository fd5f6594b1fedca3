use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn repo_file(rel: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..").join(rel)
}

fn cflsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_cflsim")).args(args).output().expect("spawn cflsim")
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn csv_rows(path: &Path) -> (Vec<String>, Vec<Vec<String>>) {
    let mut r = csv::Reader::from_path(path).unwrap();
    let header = r.headers().unwrap().iter().map(String::from).collect();
    let rows = r.records().map(|x| x.unwrap().iter().map(String::from).collect()).collect();
    (header, rows)
}

#[test]
fn minimal_run_writes_all_artifacts() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("run");
    let o = cflsim(&["run", "--config", s(&repo_file("configs/minimal.json")), "--out", s(&out)]);
    assert!(o.status.success(), "{}", stderr(&o));
    for f in ["events.jsonl", "summary.json", "metrics.csv", "manifest.json"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let m = json(&out.join("manifest.json"));
    assert_eq!(m["status"], "completed");
    assert_eq!(m["seed"], 7);
    assert_eq!(m["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(m["artifacts"]["summary"], "summary.json");
    assert!(m["wall_clock_s"].as_f64().unwrap() >= 0.0);
    let events = std::fs::read_to_string(out.join("events.jsonl")).unwrap();
    assert_eq!(events.lines().count() as u64, m["rounds_run"].as_u64().unwrap());
    for line in events.lines() {
        serde_json::from_str::<Value>(line).unwrap();
    }
    let (header, rows) = csv_rows(&out.join("metrics.csv"));
    assert_eq!(header, ["round", "metric", "value"]);
    assert!(!rows.is_empty());
}

#[test]
fn strategy_override_is_recorded() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("bc");
    let o = cflsim(&[
        "run",
        "-c",
        s(&repo_file("configs/minimal.json")),
        "-o",
        s(&out),
        "--strategy",
        "best_channel",
        "--seed",
        "11",
        "--eval-every",
        "3",
        "--set",
        "wireless.subchannels=3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let summary = json(&out.join("summary.json"));
    assert_eq!(summary["config"]["strategy"], "best_channel");
    assert_eq!(summary["config"]["seed"], 11);
    assert_eq!(summary["config"]["eval_every"], 3);
    assert_eq!(summary["config"]["wireless"]["subchannels"], 3);
    let ov: Vec<&str> = summary["overrides"].as_array().unwrap().iter().map(|v| v.as_str().unwrap()).collect();
    assert!(ov.contains(&"strategy=\"best_channel\""), "{ov:?}");
    assert!(ov.contains(&"wireless.subchannels=3"), "{ov:?}");
}

#[test]
fn unknown_key_exits_2_naming_key_and_line() {
    let dir = TempDir::new().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, "{\n  \"num_clients\": 6,\n  \"wireless\": {\n    \"subchanels\": 4\n  }\n}\n").unwrap();
    let o = cflsim(&["run", "-c", s(&cfg), "-o", s(&dir.path().join("out"))]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.contains("subchanels") && err.contains("line 4"), "{err}");

    let o = cflsim(&["run", "-c", s(&repo_file("configs/minimal.json")), "-o", s(&dir.path().join("o2")), "--set", "epochz=2"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("epochz"));
}

#[test]
fn invalid_values_and_syntax_exit_2() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    let minimal = repo_file("configs/minimal.json");
    let o = cflsim(&["run", "-c", s(&minimal), "-o", s(&out), "--set", "learning_rate=0"]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("learning_rate"));
    let cfg = dir.path().join("broken.json");
    std::fs::write(&cfg, "{\"num_clients\": 6,\n}").unwrap();
    let o = cflsim(&["run", "-c", s(&cfg), "-o", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
    let o = cflsim(&["run", "-c", s(&dir.path().join("missing.json")), "-o", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    let o = cflsim(&["run", "-c", s(&minimal), "-o", s(&out), "--strategy", "fastest"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn runtime_abort_exits_1_and_keeps_partial_logs() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("out");
    // Twenty clients in two groups: the first split needs an exhaustive
    // bipartition over more members than supported.
    let o = cflsim(&[
        "run",
        "-c",
        s(&repo_file("configs/acceptance.json")),
        "-o",
        s(&out),
        "--set",
        "num_clients=20",
        "--set",
        "data.num_groups=2",
    ]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    let m = json(&out.join("manifest.json"));
    assert_eq!(m["status"], "failed");
    assert!(m["error"].as_str().unwrap().contains("bipartition"));
    assert_eq!(m["artifacts"]["summary"], Value::Null);
    assert!(!out.join("summary.json").exists());
    let events = std::fs::read_to_string(out.join("events.jsonl")).unwrap();
    assert!(events.lines().count() >= 1);
    assert_eq!(events.lines().count() as u64, m["rounds_run"].as_u64().unwrap());
}

#[test]
fn manifest_reproduces_the_run() {
    let dir = TempDir::new().unwrap();
    let first = dir.path().join("first");
    let o = cflsim(&[
        "run",
        "-c",
        s(&repo_file("configs/acceptance.json")),
        "-o",
        s(&first),
        "--seed",
        "4",
        "--set",
        "parallel=true",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let second = dir.path().join("second");
    let o = cflsim(&["run", "-c", s(&first.join("manifest.json")), "-o", s(&second)]);
    assert!(o.status.success(), "{}", stderr(&o));
    let read = |p: &Path| std::fs::read(p).unwrap();
    assert_eq!(read(&first.join("events.jsonl")), read(&second.join("events.jsonl")));
    assert_eq!(read(&first.join("metrics.csv")), read(&second.join("metrics.csv")));
    assert_eq!(json(&first.join("manifest.json"))["config"], json(&second.join("manifest.json"))["config"]);
}

#[test]
fn compare_two_by_two_gives_four_rows_and_summary() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("cmp");
    let o = cflsim(&[
        "compare",
        "-c",
        s(&repo_file("configs/minimal.json")),
        "-o",
        s(&out),
        "--strategies",
        "random,max_samples",
        "--seeds",
        "1,2",
        "--jobs",
        "2",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (header, rows) = csv_rows(&out.join("comparison.csv"));
    assert_eq!(header, ["strategy", "seed", "first_split_round", "gap", "rounds_to_all_stopped", "total_time_s"]);
    let keys: Vec<(&str, &str)> = rows.iter().map(|r| (r[0].as_str(), r[1].as_str())).collect();
    assert_eq!(keys, [("random", "1"), ("random", "2"), ("max_samples", "1"), ("max_samples", "2")]);
    let (header, summary) = csv_rows(&out.join("comparison_summary.csv"));
    assert_eq!(header, ["strategy", "metric", "runs", "n", "mean", "std"]);
    assert_eq!(summary.len(), 8);
    assert!(summary.iter().all(|r| r[2] == "2"));
    assert_eq!(std::fs::read_dir(out.join("cells")).unwrap().count(), 4);
}

#[test]
fn compare_repeated_strategy_gives_identical_rows() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("cmp");
    let o = cflsim(&[
        "compare",
        "-c",
        s(&repo_file("configs/acceptance.json")),
        "-o",
        s(&out),
        "--strategies",
        "random,random",
        "--seeds",
        "3",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (_, rows) = csv_rows(&out.join("comparison.csv"));
    assert_eq!(rows.len(), 2);
    assert_eq!(rows[0], rows[1]);
    let ev = |i: usize| std::fs::read(out.join(format!("cells/{i:03}_random_seed3/events.jsonl"))).unwrap();
    assert_eq!(ev(0), ev(1));
}

#[test]
fn compare_proposed_splits_earlier_than_random() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("cmp");
    let o = cflsim(&[
        "compare",
        "-c",
        s(&repo_file("configs/acceptance.json")),
        "-o",
        s(&out),
        "--strategies",
        "proposed_two_phase,random",
        "--seeds",
        "1,2,3,4,5",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let (_, rows) = csv_rows(&out.join("comparison.csv"));
    let max_rounds = 200.0;
    // A run that never splits counts as one round past the horizon.
    let mean = |name: &str| {
        let v: Vec<f64> = rows
            .iter()
            .filter(|r| r[0] == name)
            .map(|r| r[2].parse().unwrap_or(max_rounds + 1.0))
            .collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    let (p, r) = (mean("proposed_two_phase"), mean("random"));
    assert!(p < r, "proposed {p} vs random {r}");
}

#[test]
fn bound_presets_emit_csv_and_report() {
    let dir = TempDir::new().unwrap();
    for preset in ["deterministic", "heterogeneous", "identical"] {
        let out = dir.path().join(preset);
        let o = cflsim(&["bound", "--preset", preset, "-o", s(&out), "--set", "seeds=10", "--set", "rounds=40"]);
        assert!(o.status.success(), "{preset}: {}", stderr(&o));
        let (header, rows) = csv_rows(&out.join("bound.csv"));
        assert_eq!(header, ["round", "empirical", "bound"]);
        assert_eq!(rows.len(), 41);
        for r in &rows {
            let e: f64 = r[1].parse().unwrap();
            let b: f64 = r[2].parse().unwrap();
            assert!(e <= 1.05 * b, "{preset} round {}: {e} > {b}", r[0]);
        }
        let rep = json(&out.join("bound_report.json"));
        assert_eq!(rep["passed"], true, "{preset}");
        assert_eq!(rep["violation_count"], 0);
        assert!(rep["zeta2_readings"]["theorem"].is_number());
        assert!(rep["zeta1_findings"].as_array().unwrap().iter().all(|f| {
            let z = f["zeta1"].as_f64().unwrap();
            !(z > 0.0 && z < 1.0)
        }));
        if preset != "heterogeneous" {
            assert_eq!(rep["optimal_gap"], 0.0, "{preset}");
        }
    }
}

#[test]
fn bound_rejects_bad_parameters() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("b");
    let o = cflsim(&["bound", "-o", s(&out), "--set", "beta=0.5"]);
    assert_eq!(o.status.code(), Some(2));
    let cfg = dir.path().join("b.json");
    std::fs::write(&cfg, "{\"alpha\": 1.0,\n\"stepz\": 3}").unwrap();
    let o = cflsim(&["bound", "-c", s(&cfg), "-o", s(&out)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("stepz") && stderr(&o).contains("line 2"), "{}", stderr(&o));
}

#[test]
fn help_documents_flags_and_log_variable() {
    let o = cflsim(&["--help"]);
    let text = String::from_utf8_lossy(&o.stdout);
    assert!(text.contains("CFLSIM_LOG"));
    let o = cflsim(&["run", "--help"]);
    let text = String::from_utf8_lossy(&o.stdout);
    for flag in ["--config", "--out", "--seed", "--strategy", "--set", "--eval-every"] {
        assert!(text.contains(flag), "{flag} missing from run --help");
    }
}
