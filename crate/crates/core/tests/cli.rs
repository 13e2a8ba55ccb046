use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use sola::cli::RunConfig;
use sola::evalkit::MetricsReport;

fn sola(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sola"))
        .current_dir(dir)
        .env_remove("SOLA_OUT")
        .args(args)
        .output()
        .expect("spawn sola")
}

fn ok(out: Output) -> String {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status,
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let mut cfg = RunConfig::default();
    cfg.benchmark.train_size = 128;
    cfg.benchmark.test_size = 64;
    cfg.benchmark.holdout_size = 40;
    cfg.benchmark.n_edits = 8;
    cfg.base_train.epochs = 2;
    let path = dir.join("small.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn metrics(dir: &Path) -> MetricsReport {
    serde_json::from_str(&fs::read_to_string(dir.join("metrics.json")).unwrap()).unwrap()
}

#[test]
fn pipeline_is_reproducible_byte_for_byte() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let cfg = cfg.to_str().unwrap();
    for run in ["a", "b"] {
        ok(sola(tmp.path(), &["--config", cfg, "--out", run, "run"]));
        ok(sola(tmp.path(), &["--out", run, "drift", "--radius-grid", "0.01,0.2"]));
        ok(sola(tmp.path(), &["--out", run, "dump-keys"]));
    }
    let files = [
        "base.json",
        "base_summary.json",
        "pool.json",
        "memory.json",
        "records.jsonl",
        "metrics.json",
        "metrics.csv",
        "drift.csv",
        "keys.csv",
        "benchmark/benchmark.json",
        "benchmark/edits.jsonl",
        "benchmark/holdout.jsonl",
        "benchmark/probes.jsonl",
    ];
    for f in files {
        let a = fs::read(tmp.path().join("a").join(f)).unwrap();
        let b = fs::read(tmp.path().join("b").join(f)).unwrap();
        assert!(a == b, "{f} differs");
    }
    let m = metrics(&tmp.path().join("a"));
    assert_eq!(m.n_edits, 8);
    assert_eq!(m.trr.to_bits(), m.trr_base.to_bits());
    assert!(m.holdout_bit_identical);

    let drift = fs::read_to_string(tmp.path().join("a/drift.csv")).unwrap();
    assert_eq!(drift.lines().next(), Some("radius,updates,mismatches,err,trr"));
    assert_eq!(drift.lines().count(), 3);
    let keys = fs::read_to_string(tmp.path().join("a/keys.csv")).unwrap();
    assert_eq!(keys.lines().count(), 1 + 8);
}

#[test]
fn saved_config_round_trips() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    ok(sola(
        tmp.path(),
        &["--config", cfg.to_str().unwrap(), "--seed", "11", "--out", "r", "gen"],
    ));
    let text = fs::read_to_string(tmp.path().join("r/run_config.json")).unwrap();
    let parsed: RunConfig = serde_json::from_str(&text).unwrap();
    assert_eq!(parsed.seed, 11);
    assert_eq!(parsed.benchmark.seed, 11);
    assert_eq!(format!("{}\n", serde_json::to_string_pretty(&parsed).unwrap()), text);
}

#[test]
fn rollback_then_eval_counts_restored_edits() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    ok(sola(
        tmp.path(),
        &["--config", cfg.to_str().unwrap(), "--out", "r", "run"],
    ));
    let before = metrics(&tmp.path().join("r"));
    let msg = ok(sola(tmp.path(), &["--out", "r", "rollback", "--edit-ids", "1,5"]));
    assert!(msg.contains("2 keys removed"), "{msg}");
    let msg = ok(sola(tmp.path(), &["--out", "r", "rollback", "--edit-ids", "1,5"]));
    assert!(msg.contains("0 keys removed"), "{msg}");
    ok(sola(tmp.path(), &["--out", "r", "eval"]));
    let after = metrics(&tmp.path().join("r"));
    assert_eq!(after.active_edits, 6);
    assert_eq!(after.rolled_back_edits, 2);
    assert_eq!(after.rolled_back_restored, 2);
    assert_eq!(after.total_memory_entries, before.total_memory_entries - 2);
    assert!(after.holdout_bit_identical);

    let unknown = sola(tmp.path(), &["--out", "r", "rollback", "--edit-ids", "99"]);
    assert!(!unknown.status.success());
}

#[test]
fn ablations_emit_one_row_per_setting() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    ok(sola(
        tmp.path(),
        &["--config", cfg.to_str().unwrap(), "--out", "r", "run"],
    ));
    ok(sola(tmp.path(), &["--out", "r", "ablate-rank", "--ranks", "1,2"]));
    ok(sola(
        tmp.path(),
        &["--out", "r", "ablate-layers", "--layers", "0-1,2-3"],
    ));
    let rank = fs::read_to_string(tmp.path().join("r/ablate_rank.csv")).unwrap();
    let rows: Vec<&str> = rank.lines().collect();
    assert!(rows[0].starts_with("rank,es,err,trr"));
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("1,") && rows[2].starts_with("2,"));
    let layers = fs::read_to_string(tmp.path().join("r/ablate_layers.csv")).unwrap();
    let rows: Vec<&str> = layers.lines().collect();
    assert_eq!(rows.len(), 3);
    assert!(rows[1].starts_with("0-1,") && rows[2].starts_with("2-3,"));
}

#[test]
fn missing_artifacts_name_the_path() {
    let tmp = tempfile::tempdir().unwrap();
    for cmd in ["edit", "eval", "drift", "dump-keys", "train-base"] {
        let out = sola(tmp.path(), &["--out", "empty", cmd]);
        assert!(!out.status.success(), "{cmd} succeeded");
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains("empty/"), "{cmd}: {err}");
    }
}

#[test]
fn usage_errors_exit_nonzero() {
    let tmp = tempfile::tempdir().unwrap();
    let out = sola(tmp.path(), &["--no-such-flag", "gen"]);
    assert_eq!(out.status.code(), Some(2));
    let out = sola(tmp.path(), &["rollback"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn env_out_overrides_flag() {
    let tmp = tempfile::tempdir().unwrap();
    let cfg = small_config(tmp.path());
    let out = Command::new(env!("CARGO_BIN_EXE_sola"))
        .current_dir(tmp.path())
        .env("SOLA_OUT", "from-env")
        .args(["--config", cfg.to_str().unwrap(), "--out", "from-flag", "gen"])
        .output()
        .unwrap();
    ok(out);
    assert!(tmp.path().join("from-env/benchmark/edits.jsonl").exists());
    assert!(!tmp.path().join("from-flag").exists());
}
