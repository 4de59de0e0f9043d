use std::path::Path;
use std::process::{Command, Output};

use smooth_clir::trainer::RunManifest;

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_smooth-clir"))
}

fn run(args: &[&str], dir: &Path) -> Output {
    let out = bin().args(args).current_dir(dir).output().expect("binary runs");
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn small_config(dir: &Path) {
    std::fs::write(dir.join("c.conf"), "n_queries=40\nnr_per_query=5\nepochs=2\ndim=8\n").unwrap();
}

#[test]
fn gen_train_eval_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_config(dir);
    run(&["gen", "--config", "c.conf", "--out", "corpus"], dir);
    for f in [
        "docs.jsonl",
        "queries.jsonl",
        "triples.tsv",
        "vocab_a.txt",
        "vocab_b.txt",
    ] {
        assert!(dir.join("corpus").join(f).exists(), "missing {f}");
    }
    run(
        &["train", "--config", "c.conf", "--corpus", "corpus", "--out", "run"],
        dir,
    );
    let text = std::fs::read_to_string(dir.join("run/manifest.jsonl")).unwrap();
    let manifest = RunManifest::parse_jsonl(&text, "manifest.jsonl").unwrap();
    assert_eq!(manifest.epochs.len(), 3);
    assert!(manifest.test.is_some());

    let eval = run(
        &[
            "eval",
            "--config",
            "c.conf",
            "--corpus",
            "corpus",
            "--checkpoint",
            "run/checkpoint_final.txt",
            "--split",
            "test",
            "--out",
            "ev",
        ],
        dir,
    );
    let table = std::fs::read_to_string(dir.join("ev/metrics.tsv")).unwrap();
    assert!(table.starts_with("metric\tvalue\tn_queries\n"));
    assert_eq!(table.lines().count(), 8);
    assert!(String::from_utf8(eval.stdout).unwrap().contains(&table));
}

#[test]
fn seed_flag_changes_the_run() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    small_config(dir);
    run(&["train", "--config", "c.conf", "--seed", "1", "--out", "a"], dir);
    run(&["train", "--config", "c.conf", "--seed", "1", "--out", "b"], dir);
    run(&["train", "--config", "c.conf", "--seed", "2", "--out", "c"], dir);
    let read = |d: &str| std::fs::read(dir.join(d).join("checkpoint_final.txt")).unwrap();
    assert_eq!(read("a"), read("b"));
    assert_ne!(read("a"), read("c"));
}

#[test]
fn diagnostics_write_tables() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    run(&["loss-curves", "--out", "lc"], dir);
    let sosl = std::fs::read_to_string(dir.join("lc/loss_curves_sosl.tsv")).unwrap();
    assert_eq!(sosl.lines().count(), 2002);
    run(&["grad-field", "--out", "gf"], dir);
    assert!(std::fs::read_dir(dir.join("gf")).unwrap().count() > 0);
}

#[test]
fn gradcheck_passes() {
    let tmp = tempfile::tempdir().unwrap();
    std::fs::write(tmp.path().join("g.conf"), "instances=10\n").unwrap();
    let out = run(&["gradcheck", "--config", "g.conf", "--out", "gc"], tmp.path());
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(!text.contains("FAIL"), "{text}");
}

#[test]
fn bad_input_exits_with_error() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path();
    let missing = bin()
        .args(["train", "--config", "nope.conf"])
        .current_dir(dir)
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&missing.stderr).contains("nope.conf"));

    std::fs::write(dir.join("bad.conf"), "epsilon=0\n").unwrap();
    let nonsmooth = bin()
        .args(["train", "--config", "bad.conf"])
        .current_dir(dir)
        .output()
        .unwrap();
    assert_eq!(nonsmooth.status.code(), Some(2));

    std::fs::write(dir.join("typo.conf"), "epochz=3\n").unwrap();
    let typo = bin()
        .args(["train", "--config", "typo.conf"])
        .current_dir(dir)
        .output()
        .unwrap();
    assert_eq!(typo.status.code(), Some(2));
}
