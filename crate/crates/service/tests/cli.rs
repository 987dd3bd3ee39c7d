use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn iviq(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_iviq"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = iviq(args);
    assert!(
        out.status.success(),
        "iviq {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn small_world(dir: &Path) -> PathBuf {
    let manifest = dir.join("world.json");
    ok(&["world", "--seed", "7", "--videos", "80", "--out", s(&manifest)]);
    manifest
}

#[test]
fn missing_manifest_is_a_usage_error() {
    for cmd in [&["eval", "--out", "x.json"][..], &["simulate", "--query", "a man"], &["index", "build"]] {
        let out = iviq(cmd);
        assert_eq!(out.status.code(), Some(2), "{cmd:?}");
        assert!(String::from_utf8_lossy(&out.stderr).contains("--manifest"));
    }
}

#[test]
fn eval_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_world(dir.path());
    let run = |name: &str| {
        let out = dir.path().join(name);
        let csv = dir.path().join(format!("{name}.csv"));
        ok(&[
            "eval", "--manifest", s(&manifest), "--provider", "synthetic", "--seed", "7", "--ask-object",
            "--parallelism", "3", "--out", s(&out), "--csv", s(&csv),
        ]);
        (fs::read(out).unwrap(), fs::read_to_string(csv).unwrap())
    };
    let (a, csv_a) = run("a.json");
    let (b, csv_b) = run("b.json");
    assert_eq!(a, b);
    assert_eq!(csv_a, csv_b);
    assert!(csv_a.starts_with("round,R1,R5,R10,MdR\n"));

    let report: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(report["schema"], "iviq-report/1");
    assert_eq!(report["sessions"], 80);
    assert_eq!(report["config"]["session"]["augmentations"]["ask_object"], true);
    assert_eq!(report["config"]["parallelism"], 3);
}

#[test]
fn eval_records_replay() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_world(dir.path());
    let records = dir.path().join("records");
    ok(&[
        "eval", "--manifest", s(&manifest), "--limit", "5", "--out", s(&dir.path().join("r.json")),
        "--records", s(&records),
    ]);
    let files: Vec<_> = fs::read_dir(&records).unwrap().map(|e| e.unwrap().path()).collect();
    assert_eq!(files.len(), 5);
    let out = ok(&["replay", "--manifest", s(&manifest), "--record", s(&files[0])]);
    assert!(out.contains("reproduce exactly"));
}

#[test]
fn invalid_config_lists_every_problem() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_world(dir.path());
    let config = dir.path().join("bad.toml");
    fs::write(&config, "parallelism = 0\n[session]\nrerank_k = 0\ncaption_k = 0\ntop_n = 0\n").unwrap();
    let out = iviq(&["eval", "--manifest", s(&manifest), "--config", s(&config), "--out", "unused.json"]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    for needle in ["parallelism", "rerank_k", "caption_k", "top_n"] {
        assert!(err.contains(needle), "{needle} missing from:\n{err}");
    }
}

#[test]
fn unknown_names_are_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_world(dir.path());
    let out = iviq(&["eval", "--manifest", s(&manifest), "--generator", "magic", "--out", "unused.json"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("unknown generator \"magic\""));
}

#[test]
fn simulate_prints_a_bounded_dialogue() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_world(dir.path());
    let record = dir.path().join("session.json");
    let out = ok(&[
        "simulate", "--manifest", s(&manifest), "--generator", "heuristic", "--query", "a man is singing",
        "--out", s(&record),
    ]);
    let questions = out.lines().filter(|l| l.starts_with('Q')).count();
    let answers = out.lines().filter(|l| l.starts_with('A')).count();
    assert!((1..=6).contains(&questions), "{out}");
    assert_eq!(questions, answers);
    assert!(out.contains("Q1: what is the man doing?"), "{out}");
    assert!(out.contains("round 0: target at rank"));
    let replayed = ok(&["replay", "--manifest", s(&manifest), "--record", s(&record)]);
    assert!(replayed.contains("reproduce exactly"));
}

#[test]
fn index_build_then_verify() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_world(dir.path());
    let index = dir.path().join("world.idx");
    ok(&["index", "build", "--manifest", s(&manifest)]);
    assert!(index.exists());
    let out = ok(&["index", "verify", "--manifest", s(&manifest)]);
    assert!(out.contains("80 rows OK"));

    // A saved index feeds evaluation exactly like an in-memory one.
    let with = dir.path().join("with.json");
    let without = dir.path().join("without.json");
    ok(&["eval", "--manifest", s(&manifest), "--index", s(&index), "--limit", "10", "--out", s(&with)]);
    ok(&["eval", "--manifest", s(&manifest), "--limit", "10", "--out", s(&without)]);
    assert_eq!(fs::read(with).unwrap(), fs::read(without).unwrap());

    // Another seed embeds differently, so the saved rows no longer match.
    let out = iviq(&["index", "verify", "--manifest", s(&manifest), "--seed", "8"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("differs from a fresh embedding"));

    fs::write(&index, b"garbage").unwrap();
    let out = iviq(&["index", "verify", "--manifest", s(&manifest), "--shallow"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn timing_writes_a_table() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_world(dir.path());
    let table = dir.path().join("timing.csv");
    let out = ok(&[
        "timing", "--manifest", s(&manifest), "--sample", "5", "--delay-ms", "2", "--out", s(&table),
    ]);
    let csv = fs::read_to_string(&table).unwrap();
    assert_eq!(out, csv);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "provider,answers,errors,mean_secs,total_secs");
    assert!(lines[1].starts_with("videoqa,"));
    assert!(lines[2].starts_with("cap_lm,"));
}

#[test]
fn unwritable_output_fails_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = small_world(dir.path());
    let out = iviq(&[
        "eval", "--manifest", s(&manifest), "--limit", "2", "--out", s(&dir.path().join("missing/dir/r.json")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing/dir/r.json"));
}
