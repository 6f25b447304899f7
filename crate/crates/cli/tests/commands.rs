//! End-to-end command tests on small synthetic routes.

use std::path::{Path, PathBuf};
use std::process::Command as Proc;

use ridership_cli::{run_from, RunError};

/// Runs a command in-process and returns its stdout.
fn run(args: &[&str]) -> Result<String, RunError> {
    let mut out = Vec::new();
    let full = std::iter::once("ridership").chain(args.iter().copied()).chain(["--quiet"]);
    run_from(full, &mut out)?;
    Ok(String::from_utf8(out).unwrap())
}

fn ok(args: &[&str]) -> String {
    run(args).unwrap_or_else(|e| panic!("{args:?}: {e}"))
}

fn err(args: &[&str]) -> String {
    match run(args) {
        Ok(out) => panic!("{args:?} succeeded:\n{out}"),
        Err(e) => e.to_string(),
    }
}

/// A synthetic route ingested into `dir`, plus `extra` config lines.
struct Route {
    _tmp: tempfile::TempDir,
    dir: PathBuf,
    conf: PathBuf,
}

impl Route {
    fn new(days: &str, stops: &str, extra: &str) -> Self {
        let tmp = tempfile::tempdir().unwrap();
        let dir = tmp.path().to_path_buf();
        ok(&["--out", s(&dir), "--seed", "5", "synth", "--days", days, "--stops", stops]);
        let conf = dir.join("route.conf");
        let mut text = std::fs::read_to_string(&conf).unwrap();
        text.push_str(extra);
        std::fs::write(&conf, text).unwrap();
        let r = Route { _tmp: tmp, dir, conf };
        r.ok(&["ingest"]);
        r
    }

    fn args<'a>(&'a self, rest: &[&'a str]) -> Vec<&'a str> {
        let mut v = vec!["--out", s(&self.dir), "--config", s(&self.conf)];
        v.extend_from_slice(rest);
        v
    }

    fn ok(&self, rest: &[&str]) -> String {
        ok(&self.args(rest))
    }

    fn err(&self, rest: &[&str]) -> String {
        err(&self.args(rest))
    }

    fn file(&self, name: &str) -> Vec<u8> {
        std::fs::read(self.dir.join(name)).unwrap_or_else(|e| panic!("{name}: {e}"))
    }

    fn has(&self, name: &str) -> bool {
        self.dir.join(name).exists()
    }
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Keeps networks tiny so every test trains in seconds.
const SMALL_HP: &str = "hp.batch_size = 64\nhp.sequence_length = 4\nhp.lstm_nodes = 4\nhp.n_layers = 1\nhp.learning_rate = 0.01\nhp.optimizer = Adam\n";

#[test]
fn synth_and_ingest_summaries() {
    let tmp = tempfile::tempdir().unwrap();
    let out = ok(&["--out", s(tmp.path()), "--seed", "7", "synth", "--days", "60"]);
    assert!(out.contains("records           7800"), "{out}");
    let conf = tmp.path().join("route.conf");
    let json = ok(&["--out", s(tmp.path()), "--config", s(&conf), "--format", "json", "ingest"]);
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["records"], 7800);
    assert_eq!(v["incomplete_services"], 0);
    assert_eq!(v["first_date"], "2021-10-01");
    let (rain, dry) = (v["rain_hours"].as_u64().unwrap(), v["no_rain_hours"].as_u64().unwrap());
    assert_eq!(rain + dry, 60 * 18);
    assert!(tmp.path().join("dataset.json").exists());
}

#[test]
fn empty_ridership_file_fails_ingest() {
    let tmp = tempfile::tempdir().unwrap();
    ok(&["--out", s(tmp.path()), "synth", "--days", "2"]);
    std::fs::write(tmp.path().join("ridership.csv"), "").unwrap();
    let conf = tmp.path().join("route.conf");
    let out = Proc::new(env!("CARGO_BIN_EXE_ridership"))
        .args(["--out", s(tmp.path()), "--config", s(&conf), "ingest"])
        .output()
        .unwrap();
    assert!(!out.status.success());
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("error [ingest]: dataset is empty"), "{stderr}");
}

#[test]
fn train_writes_one_checkpoint_per_joint_model_and_one_per_stop_for_per_stop() {
    let r = Route::new("8", "3", SMALL_HP);
    r.ok(&["train", "--method", "D", "--max-epochs", "2"]);
    assert!(r.has("model_d_s1.ckpt") && r.has("history_d_s1.csv"));
    let history = String::from_utf8(r.file("history_d_s1.csv")).unwrap();
    assert_eq!(history.lines().count(), 3, "{history}");

    r.ok(&["train", "--method", "Halyal", "--max-epochs", "2", "--seeds", "2"]);
    for seed in [1, 2] {
        for k in 1..=3 {
            assert!(r.has(&format!("model_halyal_s{seed}_stop{k}.ckpt")));
            assert!(r.has(&format!("history_halyal_s{seed}_stop{k}.csv")));
        }
        assert!(!r.has(&format!("model_halyal_s{seed}_stop4.ckpt")));
    }
}

#[test]
fn unknown_method_is_a_usage_error() {
    let r = Route::new("3", "2", "");
    assert!(matches!(
        run(&r.args(&["train", "--method", "E"])),
        Err(RunError::Usage(_))
    ));
    let out = Proc::new(env!("CARGO_BIN_EXE_ridership"))
        .args(["train", "--method", "E"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown method"));
}

#[test]
fn statistical_is_not_trainable() {
    let r = Route::new("3", "2", "");
    assert!(r.err(&["train", "--method", "statistical"]).starts_with("error [train]"));
}

#[test]
fn tune_smoke_run_is_reproducible() {
    let space = "\
tune.batch_size = 32, 64
tune.sequence_length = 4, 8
tune.lstm_nodes = 3, 6
tune.n_layers = 1
tune.learning_rate = 0.01, 0.001
tune.optimizer = Adam, SGD
";
    let r = Route::new("6", "2", space);
    r.ok(&["tune", "--method", "D", "--max-epochs", "9", "--eta", "3"]);
    let first = r.file("tuning_d.csv");
    let text = String::from_utf8(first.clone()).unwrap();
    let rows: Vec<&str> = text.lines().skip(1).collect();
    // brackets s = 2, 1, 0 run 9+3+1, 5+1 and 3 trials
    assert_eq!(rows.len(), 22);
    assert!(rows.len() >= 9);
    let winners: Vec<&&str> = rows.iter().filter(|l| l.ends_with(",1")).collect();
    assert_eq!(winners.len(), 1, "{text}");
    let best = String::from_utf8(r.file("best_d.conf")).unwrap();
    assert!(best.contains("hp.lstm_nodes = "), "{best}");

    r.ok(&["tune", "--method", "D", "--max-epochs", "9", "--eta", "3"]);
    assert_eq!(r.file("tuning_d.csv"), first);
}

#[test]
fn tune_per_stop_method_one_stop() {
    let space = "tune.batch_size = 64\ntune.sequence_length = 4\ntune.lstm_nodes = 3\ntune.n_layers = 1\ntune.learning_rate = 0.01\ntune.optimizer = Adam\n";
    let r = Route::new("5", "2", space);
    r.ok(&["tune", "--method", "Halyal", "--stop", "2", "--max-epochs", "3"]);
    assert!(r.has("tuning_halyal_stop2.csv") && r.has("best_halyal_stop2.conf"));
    assert!(!r.has("tuning_halyal_stop1.csv"));
    assert!(r.err(&["tune", "--method", "Halyal", "--stop", "3", "--max-epochs", "3"]).contains("outside"));
}

#[test]
fn evaluate_prints_six_methods_with_improvement_column() {
    let r = Route::new("20", "5", SMALL_HP);
    for m in ["A", "B", "C", "D", "Halyal"] {
        r.ok(&["train", "--method", m, "--max-epochs", "2"]);
    }
    let out = r.ok(&["evaluate", "--seeds", "1"]);
    let lines: Vec<&str> = out.lines().collect();
    assert!(lines[0].contains("stop 5") && lines[0].contains("vs Halyal"), "{out}");
    let table: Vec<&&str> = lines[1..].iter().take_while(|l| !l.starts_with("wrote")).collect();
    assert_eq!(table.len(), 6, "{out}");
    for row in &table {
        // method, five stops, mean, improvement
        assert_eq!(row.split_whitespace().count(), 8, "{row}");
    }
    assert!(r.has("report.csv") && r.has("report.json") && r.has("improvement.csv"));
    let csv = String::from_utf8(r.file("report.csv")).unwrap();
    assert_eq!(csv.lines().count(), 7, "{csv}");

    let json = r.ok(&["--format", "json", "evaluate", "--methods", "D,Statistical", "--seeds", "1"]);
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["report"]["methods"].as_array().unwrap().len(), 2);
    assert!(v["improvements"].as_array().unwrap().is_empty());
}

#[test]
fn evaluate_names_the_method_without_a_checkpoint() {
    let r = Route::new("12", "2", SMALL_HP);
    r.ok(&["train", "--method", "D", "--max-epochs", "1"]);
    let e = r.err(&["evaluate", "--methods", "D,B", "--seeds", "1"]);
    assert!(e.starts_with("error [evaluate]: missing model") && e.contains("for method B"), "{e}");
    let e = r.err(&["evaluate", "--methods", "D", "--seeds", "2"]);
    assert!(e.contains("seed 2"), "{e}");
}

#[test]
fn checkpoints_from_another_split_are_rejected() {
    let r = Route::new("12", "2", SMALL_HP);
    r.ok(&["train", "--method", "D", "--max-epochs", "1"]);
    let conf = std::fs::read_to_string(&r.conf).unwrap()
        + "split.validation_start = 2021-10-05\nsplit.test_start = 2021-10-09\n";
    std::fs::write(&r.conf, conf).unwrap();
    let e = r.err(&["evaluate", "--methods", "D", "--seeds", "1"]);
    assert!(e.starts_with("error [load]") && e.contains("different dataset or split"), "{e}");
}

#[test]
fn predict_next_service_per_stop() {
    // default joint hyperparameters use a 26-service look-back
    let r = Route::new("10", "5", "");
    r.ok(&["train", "--method", "D", "--max-epochs", "1"]);
    let out = r.ok(&["predict", "--method", "D"]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["date"], "2021-10-11");
    assert_eq!(v["service_index"], 1);
    let preds = v["predictions"].as_object().unwrap();
    let keys: Vec<&String> = preds.keys().collect();
    assert_eq!(keys, ["1", "2", "3", "4", "5"]);
    assert!(preds.values().all(|p| p.as_f64().unwrap() >= 0.0));

    // exactly one day of history before the second day's first service
    r.ok(&["predict", "--method", "D", "--at", "2021-10-02:1"]);
    let e = r.err(&["predict", "--method", "D", "--at", "2021-10-01:26"]);
    assert!(e.contains("need 26 services of history, got 25"), "{e}");

    let csv = r.ok(&["--format", "csv", "predict", "--method", "D"]);
    assert_eq!(csv.lines().count(), 6);
}

#[test]
fn correlate_writes_matrix() {
    let r = Route::new("15", "4", "");
    let out = r.ok(&["--format", "json", "correlate"]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    let m = v["matrix"].as_array().unwrap();
    assert_eq!(m.len(), 4);
    for (i, row) in m.iter().enumerate() {
        for (j, c) in row.as_array().unwrap().iter().enumerate() {
            let c = c.as_f64().unwrap();
            if i == j {
                assert_eq!(c, 1.0);
            } else {
                assert!(c > 0.0 && c < 1.0);
            }
        }
    }
    let csv = String::from_utf8(r.file("correlation.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5);
    r.ok(&["correlate", "--split", "train"]);
    assert!(r.err(&["correlate", "--split", "test"]).starts_with("error [config]"));
}

#[test]
fn commands_log_config_and_name_failing_stage() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Proc::new(env!("CARGO_BIN_EXE_ridership"))
        .args(["--out", s(tmp.path()), "--seed", "42", "train", "--method", "D"])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(1));
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(stderr.contains("run.seed = 42"), "{stderr}");
    assert!(stderr.contains("error [load]") && stderr.contains("run `ingest` first"), "{stderr}");
}

#[test]
fn stale_cache_is_rejected() {
    let r = Route::new("3", "2", "");
    let path = r.dir.join("dataset.json");
    let text = std::fs::read_to_string(&path).unwrap().replacen("\"version\":1", "\"version\":0", 1);
    std::fs::write(&path, text).unwrap();
    let e = r.err(&["correlate"]);
    assert!(e.starts_with("error [load]") && e.contains("stale"), "{e}");
}
