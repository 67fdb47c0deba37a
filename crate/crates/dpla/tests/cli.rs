//! End-to-end tests of the `dpla` binary: artifact round trips,
//! determinism through the process boundary, cache redirection, and
//! error exits.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use dpla::eval::MetricsReport;

fn dpla() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_dpla"));
    cmd.env_remove("DPLA_CACHE_DIR");
    cmd
}

fn stdout(out: &Output) -> String {
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn check_grads_passes_on_fresh_build() {
    let out = dpla().arg("check-grads").output().unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    let text = stdout(&out);
    assert!(text.contains("suite max"), "{text}");
    assert!(text.contains("composite objective"));
}

#[test]
fn run_eval_export_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let out_dir = dir.path().join("run");

    let run = dpla()
        .args(["run", "--seed", "5", "--epochs", "2", "--out"])
        .arg(&out_dir)
        .output()
        .unwrap();
    assert!(run.status.success(), "{}", stderr(&run));

    let metrics = fs::read_to_string(out_dir.join("metrics.txt")).unwrap();
    let lines: Vec<&str> = metrics.lines().collect();
    assert_eq!(lines.len(), 2);
    assert_eq!(stdout(&run).trim(), metrics.trim(), "stdout and file records differ");
    for line in &lines {
        MetricsReport::parse_record(line).unwrap();
    }
    assert!(out_dir.join("manifest.toml").exists());
    assert!(out_dir.join("model.ckpt").exists());

    let eval = dpla().args(["eval", "--out"]).arg(&out_dir).output().unwrap();
    assert!(eval.status.success(), "{}", stderr(&eval));
    let eval_text = stdout(&eval);
    let mut eval_lines = eval_text.lines();
    let test_line = eval_lines.next().unwrap();
    let pool_line = eval_lines.next().unwrap();
    assert!(test_line.starts_with("test "));
    assert!(pool_line.starts_with("pool "));
    let rescored = MetricsReport::parse_record(test_line.trim_start_matches("test ")).unwrap();
    let trained = MetricsReport::parse_record(lines[1]).unwrap();
    assert_eq!(rescored, trained, "re-scoring the checkpoint drifted from the training history");
    MetricsReport::parse_record(pool_line.trim_start_matches("pool ")).unwrap();

    let export = dpla().args(["export", "--out"]).arg(&out_dir).output().unwrap();
    assert!(export.status.success(), "{}", stderr(&export));
    let csv = fs::read_to_string(out_dir.join("metrics.csv")).unwrap();
    let mut rows = csv.lines();
    assert_eq!(
        rows.next().unwrap(),
        "epoch,known_acc,novel_acc,all_acc,novel_nmi,all_nmi"
    );
    for (row, record) in rows.zip(&lines) {
        let report = MetricsReport::parse_record(record).unwrap();
        let fields: Vec<&str> = row.split(',').collect();
        assert_eq!(fields.len(), 6);
        assert_eq!(fields[0].parse::<usize>().unwrap(), report.epoch);
        for (field, value) in fields[1..].iter().zip([
            report.known_acc,
            report.novel_acc,
            report.all_acc,
            report.novel_nmi,
            report.all_nmi,
        ]) {
            match value {
                Some(v) => assert_eq!(field.parse::<f64>().unwrap(), v),
                None => assert!(field.is_empty()),
            }
        }
    }
}

#[test]
fn single_epoch_run_emits_one_record() {
    let dir = tempfile::tempdir().unwrap();
    let out = dpla()
        .args(["run", "--epochs", "1", "--out"])
        .arg(dir.path().join("r"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out).lines().count(), 1);
}

#[test]
fn reruns_are_byte_identical() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out_dir in [&a, &b] {
        let out = dpla()
            .args(["run", "--seed", "11", "--epochs", "2", "--out"])
            .arg(out_dir)
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", stderr(&out));
    }
    assert_eq!(
        fs::read(a.join("metrics.txt")).unwrap(),
        fs::read(b.join("metrics.txt")).unwrap()
    );
    assert_eq!(
        fs::read(a.join("model.ckpt")).unwrap(),
        fs::read(b.join("model.ckpt")).unwrap()
    );
}

#[test]
fn cache_directory_can_be_redirected() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("cache");
    let out_dir = dir.path().join("run");

    let gen = dpla()
        .args(["gen-data", "--seed", "7", "--out"])
        .arg(&out_dir)
        .env("DPLA_CACHE_DIR", &cache)
        .output()
        .unwrap();
    assert!(gen.status.success(), "{}", stderr(&gen));
    assert!(stdout(&gen).contains("sha256"));
    let cached = list_bins(&cache);
    assert_eq!(cached.len(), 1, "expected one cache file in the redirect dir");

    let run = dpla()
        .args(["run", "--seed", "7", "--epochs", "1", "--out"])
        .arg(&out_dir)
        .env("DPLA_CACHE_DIR", &cache)
        .output()
        .unwrap();
    assert!(run.status.success(), "{}", stderr(&run));
    assert!(list_bins(&out_dir).is_empty(), "run must reuse the redirected cache");

    let eval = dpla()
        .args(["eval", "--out"])
        .arg(&out_dir)
        .env("DPLA_CACHE_DIR", &cache)
        .output()
        .unwrap();
    assert!(eval.status.success(), "{}", stderr(&eval));
}

fn list_bins(dir: &Path) -> Vec<String> {
    match fs::read_dir(dir) {
        Ok(entries) => entries
            .filter_map(|e| {
                let name = e.unwrap().file_name().into_string().unwrap();
                name.ends_with(".bin").then_some(name)
            })
            .collect(),
        Err(_) => Vec::new(),
    }
}

#[test]
fn config_file_overrides_apply() {
    let dir = tempfile::tempdir().unwrap();
    let config_path = dir.path().join("exp.toml");
    fs::write(&config_path, "epochs = 3\nseed = 21\n").unwrap();
    let out = dpla()
        .args(["run", "--config"])
        .arg(&config_path)
        .args(["--out"])
        .arg(dir.path().join("r"))
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(stdout(&out).lines().count(), 3);

    fs::write(&config_path, "epochz = 3\n").unwrap();
    let out = dpla()
        .args(["run", "--config"])
        .arg(&config_path)
        .args(["--out"])
        .arg(dir.path().join("r2"))
        .output()
        .unwrap();
    assert!(!out.status.success(), "unknown key must be rejected");
    assert!(stderr(&out).contains("epochz"), "{}", stderr(&out));
}

#[test]
fn missing_artifacts_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nothing");

    let eval = dpla().args(["eval", "--out"]).arg(&missing).output().unwrap();
    assert!(!eval.status.success());
    assert!(stdout(&eval).is_empty(), "no partial output on failure");
    assert!(stderr(&eval).contains("manifest"));

    let export = dpla().args(["export", "--out"]).arg(&missing).output().unwrap();
    assert!(!export.status.success());
    assert!(stderr(&export).contains("metric"));
}

#[test]
fn baseline_flag_changes_the_run() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("adj"), dir.path().join("base"));
    let adj = dpla()
        .args(["run", "--seed", "2", "--epochs", "2", "--out"])
        .arg(&a)
        .output()
        .unwrap();
    assert!(adj.status.success(), "{}", stderr(&adj));
    let base = dpla()
        .args(["run", "--seed", "2", "--epochs", "2", "--baseline", "--out"])
        .arg(&b)
        .output()
        .unwrap();
    assert!(base.status.success(), "{}", stderr(&base));
    assert!(
        fs::read_to_string(b.join("manifest.toml")).unwrap().contains("baseline_mode = true")
    );
    assert_ne!(
        fs::read(a.join("model.ckpt")).unwrap(),
        fs::read(b.join("model.ckpt")).unwrap(),
        "baseline must train differently"
    );
}
