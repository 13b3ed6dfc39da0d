//! The command-line surface: help, exit codes, manifest replay and
//! deterministic bench output.

use std::path::Path;
use std::process::{Command, Output};

const SUBCOMMANDS: [&str; 8] = [
    "gen-data",
    "distill",
    "train-target",
    "train-draft",
    "decode",
    "bench",
    "report",
    "selftest",
];

fn blockspec(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_blockspec"))
        .args(args)
        .output()
        .unwrap()
}

fn ok(args: &[&str]) -> Output {
    let out = blockspec(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Corpus, target and drafter small enough to build in about a second.
fn pipeline(dir: &Path, target_seed: &str) {
    let (c, t, d) = (dir.join("c.jsonl"), dir.join("t.json"), dir.join("d.json"));
    ok(&[
        "gen-data",
        "--task",
        "copy_repeat",
        "--seed",
        "3",
        "--count",
        "60",
        "--out",
        s(&c),
    ]);
    ok(&[
        "train-target",
        "--corpus",
        s(&c),
        "--out",
        s(&t),
        "--layers",
        "5",
        "--d-model",
        "16",
        "--heads",
        "2",
        "--d-ff",
        "32",
        "--epochs",
        "1",
        "--seed",
        target_seed,
    ]);
    ok(&[
        "train-draft",
        "--corpus",
        s(&c),
        "--target",
        s(&t),
        "--out",
        s(&d),
        "--block-size",
        "8",
        "--layers",
        "1",
        "--n-feat",
        "2",
        "--epochs",
        "1",
        "--val-count",
        "5",
    ]);
}

#[test]
fn every_subcommand_has_help() {
    for sub in SUBCOMMANDS {
        let out = blockspec(&[sub, "--help"]);
        assert_eq!(out.status.code(), Some(0), "{sub}");
        assert!(
            String::from_utf8_lossy(&out.stdout).contains("Usage"),
            "{sub}"
        );
    }
    assert_eq!(blockspec(&["--help"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_with_one() {
    assert_eq!(
        blockspec(&["decode", "--no-such-flag"]).status.code(),
        Some(1)
    );
    assert_eq!(blockspec(&["no-such-command"]).status.code(), Some(1));
    assert_eq!(
        blockspec(&["gen-data", "--task", "copy_repeat"])
            .status
            .code(),
        Some(1)
    );
}

#[test]
fn decoding_with_a_foreign_drafter_exits_with_two() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    pipeline(a.path(), "1");
    pipeline(b.path(), "2");
    let out = blockspec(&[
        "decode",
        "--target",
        s(&a.path().join("t.json")),
        "--draft",
        s(&b.path().join("d.json")),
        "--prompt-file",
        s(&a.path().join("c.jsonl")),
        "--out",
        s(&a.path().join("o.jsonl")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(
        String::from_utf8_lossy(&out.stderr).contains("hash"),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
}

#[test]
fn replaying_a_manifest_reproduces_every_artifact() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    pipeline(p, "1");
    ok(&[
        "decode",
        "--target",
        s(&p.join("t.json")),
        "--draft",
        s(&p.join("d.json")),
        "--prompt-file",
        s(&p.join("c.jsonl")),
        "--max-new",
        "16",
        "--out",
        s(&p.join("o.jsonl")),
    ]);
    for name in ["c.jsonl", "t.json", "d.json", "o.jsonl"] {
        let original = p.join(name);
        let replay = p.join(format!("replay-{name}"));
        let manifest = p.join(format!("{name}.manifest.json"));
        let sub =
            serde_json::from_str::<serde_json::Value>(&std::fs::read_to_string(&manifest).unwrap())
                .unwrap()["subcommand"]
                .as_str()
                .unwrap()
                .to_string();
        let log = p.join(format!("replay-{name}.log.jsonl"));
        let mut args = vec![sub.as_str(), "--config", s(&manifest), "--out", s(&replay)];
        // Logs default next to the output, so the replay never clobbers them.
        if sub.starts_with("train") {
            args.extend(["--log", s(&log)]);
        }
        ok(&args);
        assert_eq!(
            std::fs::read(&original).unwrap(),
            std::fs::read(&replay).unwrap(),
            "{name}"
        );
    }
}

#[test]
fn bench_acceptance_rows_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path();
    pipeline(p, "1");
    let matrix = p.join("matrix.json");
    let matrix_json = serde_json::json!({
        "target": p.join("t.json"),
        "drafters": [{ "id": "d", "checkpoint": p.join("d.json") }],
        "test_block_sizes": [4, 8],
        "temperatures": [0.0, 1.0],
        "max_new": 16,
    });
    std::fs::write(&matrix, matrix_json.to_string()).unwrap();
    for run in ["a", "b"] {
        ok(&[
            "bench",
            "--matrix",
            s(&matrix),
            "--out",
            s(&p.join(run)),
            "--seeds",
            "2",
            "--prompt-count",
            "4",
        ]);
    }
    let taus = std::fs::read(p.join("a/taus.csv")).unwrap();
    assert_eq!(taus, std::fs::read(p.join("b/taus.csv")).unwrap());
    assert!(String::from_utf8_lossy(&taus).lines().count() > 1);
    let md = ok(&["report", "--in", s(&p.join("a"))]);
    assert!(!md.stdout.is_empty());
}

#[test]
fn selftest_passes_quickly() {
    let dir = tempfile::tempdir().unwrap();
    let start = std::time::Instant::now();
    ok(&["selftest", "--out", s(dir.path())]);
    assert!(
        start.elapsed().as_secs() < 120,
        "selftest took {:?}",
        start.elapsed()
    );
}
