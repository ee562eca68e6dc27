use std::path::Path;
use std::process::{Command, Output};

use patsim::engine::SimilarityMatrix;

fn patsim(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_patsim"))
        .args(args)
        .env_remove("PATSIM_WORKERS")
        .output()
        .expect("run patsim")
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

fn ok(out: &Output) {
    assert!(out.status.success(), "exit {:?}: {}", out.status.code(), String::from_utf8_lossy(&out.stderr));
}

fn synth(dir: &Path, patients: usize) {
    ok(&patsim(&[
        "synth",
        "--patients",
        &patients.to_string(),
        "--clusters",
        "4",
        "--seed",
        "7",
        "--out",
        &s(&dir.join("c.jsonl")),
        "--annotations",
        &s(&dir.join("ann.csv")),
    ]));
}

#[test]
fn synth_writes_corpus() {
    let dir = tempfile::tempdir().unwrap();
    let out = patsim(&["synth", "--patients", "100", "--clusters", "5", "--seed", "7", "--out", &s(&dir.path().join("c.jsonl"))]);
    ok(&out);
    let corpus = patsim::corpus::load_corpus(dir.path().join("c.jsonl")).unwrap();
    assert_eq!(corpus.len(), 100);
}

#[test]
fn usage_errors_exit_2() {
    let out = patsim(&["pairs", "--mmethod", "bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--mmethod"));
    assert_eq!(patsim(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(patsim(&[]).status.code(), Some(2));
    let dir = tempfile::tempdir().unwrap();
    let out = patsim(&["segment", "--out", &s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2), "missing --corpus is a usage error");
}

#[test]
fn domain_errors_exit_1() {
    let dir = tempfile::tempdir().unwrap();
    let out = patsim(&["segment", "--corpus", &s(&dir.path().join("missing.jsonl")), "--out", &s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(1));
    std::fs::write(dir.path().join("bad.jsonl"), "{\"patient_id\": 1}\n").unwrap();
    let out = patsim(&["segment", "--corpus", &s(&dir.path().join("bad.jsonl")), "--out", &s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 1"));
}

#[test]
fn help_lists_defaults() {
    for (sub, needles) in [
        ("synth", &["--patients", "[default: 100]", "--noise", "[default: 1]"][..]),
        ("vectorize", &["--category", "[default: unfiltered]", "--dim", "[default: 50]", "--threshold"][..]),
        ("pairs", &["--workers", "PATSIM_WORKERS", "[default: 1]", "--mmethod"][..]),
        ("evaluate", &["--category", "[default: all]"][..]),
        ("gridsearch", &["--imports", "--title-dim", "[default: 10]"][..]),
        ("report", &["--sim", "--export-csv"][..]),
        ("segment", &["--inherit-titles", "[default: off]"][..]),
    ] {
        let out = patsim(&[sub, "--help"]);
        ok(&out);
        let text = String::from_utf8_lossy(&out.stdout);
        for n in needles {
            assert!(text.contains(n), "{sub} --help lacks {n}:\n{text}");
        }
    }
}

#[test]
fn config_file_and_overrides() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 30);
    let cfg = dir.path().join("patsim.toml");
    std::fs::write(&cfg, "corpus = \"c.jsonl\"\nseed = 3\ndim = 8\nworkers = 2\n").unwrap();
    let m = dir.path().join("m.jsonl");
    ok(&patsim(&["--config", &s(&cfg), "vectorize", "--out", &s(&m)]));
    let set = patsim::vectorizer::MatrixSet::load(&m).unwrap();
    assert_eq!(set.dim, 8);
    ok(&patsim(&["--config", &s(&cfg), "vectorize", "--dim", "6", "--out", &s(&m)]));
    assert_eq!(patsim::vectorizer::MatrixSet::load(&m).unwrap().dim, 6);

    let sim = dir.path().join("p.sim");
    ok(&patsim(&["--config", &s(&cfg), "pairs", "--matrices", &s(&m), "--mmethod", "mms", "--out", &s(&sim)]));
    let loaded = SimilarityMatrix::load(&sim).unwrap();
    assert_eq!((loaded.config.workers, loaded.config.seed), (2, 3));

    std::fs::write(&cfg, "corpus = \"c.jsonl\"\ncolour = \"blue\"\n").unwrap();
    let out = patsim(&["--config", &s(&cfg), "segment", "--out", &s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("colour"));
    std::fs::write(&cfg, "corpus = \"nowhere.jsonl\"\n").unwrap();
    assert_eq!(patsim(&["--config", &s(&cfg), "segment", "--out", &s(&dir.path().join("x"))]).status.code(), Some(1));
}

#[test]
fn workers_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 12);
    let m = dir.path().join("m.jsonl");
    ok(&patsim(&["vectorize", "--corpus", &s(&dir.path().join("c.jsonl")), "--dim", "5", "--out", &s(&m)]));
    let sim = dir.path().join("p.sim");
    let out = Command::new(env!("CARGO_BIN_EXE_patsim"))
        .args(["pairs", "--matrices", &s(&m), "--mmethod", "rv2", "--out", &s(&sim)])
        .env("PATSIM_WORKERS", "3")
        .output()
        .unwrap();
    ok(&out);
    assert_eq!(SimilarityMatrix::load(&sim).unwrap().config.workers, 3);
}

#[test]
fn vectorize_all_categories_and_report() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 40);
    let cats = dir.path().join("cats");
    ok(&patsim(&["vectorize", "--corpus", &s(&dir.path().join("c.jsonl")), "--category", "all", "--dim", "10", "--out", &s(&cats)]));
    let files: Vec<_> = std::fs::read_dir(&cats).unwrap().collect();
    assert_eq!(files.len(), 10);
    let med = cats.join("05_medication.jsonl");
    let set = patsim::vectorizer::MatrixSet::load(&med).unwrap();
    assert_eq!(set.category, Some(patsim::segmenter::SimilarityCategory::Medication));
    let sim = dir.path().join("med.sim");
    ok(&patsim(&["pairs", "--matrices", &s(&med), "--mmethod", "eds", "--out", &s(&sim)]));
    let excluded = std::fs::read_to_string(dir.path().join("med.sim.excluded.txt")).unwrap();
    assert_eq!(excluded.lines().count(), set.excluded.len());
    let csv_dir = dir.path().join("csv");
    let out = patsim(&["report", "--sim", &s(&sim), "--export-csv", &s(&csv_dir)]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stdout).contains("| 10 |"));
    let csv = std::fs::read_to_string(csv_dir.join("med.csv")).unwrap();
    assert!(csv.starts_with("id_a,id_b,score,defined"));
}

#[test]
fn gridsearch_lsa_only_has_18_cells() {
    let dir = tempfile::tempdir().unwrap();
    synth(dir.path(), 80);
    let out_dir = dir.path().join("grid");
    let out = patsim(&[
        "gridsearch",
        "--corpus",
        &s(&dir.path().join("c.jsonl")),
        "--annotations",
        &s(&dir.path().join("ann.csv")),
        "--out",
        &s(&out_dir),
    ]);
    ok(&out);
    assert!(String::from_utf8_lossy(&out.stderr).contains("42 cells, 18 evaluated, 24 skipped"));
    let cells = std::fs::read_to_string(out_dir.join("cells.csv")).unwrap();
    let statuses: Vec<&str> = cells.lines().skip(1).map(|l| l.split(',').nth(3).unwrap()).collect();
    assert_eq!(statuses.len(), 42);
    assert_eq!(statuses.iter().filter(|s| **s == "skipped").count(), 24);
    assert_eq!(statuses.iter().filter(|s| **s == "partial").count(), 6);
    let summary = std::fs::read_to_string(out_dir.join("summary.md")).unwrap();
    assert!(summary.contains("skipped") && summary.contains('*'));
}

#[test]
fn subcommands_are_idempotent() {
    let dir = tempfile::tempdir().unwrap();
    let run = |tag: &str| {
        let d = dir.path().join(tag);
        std::fs::create_dir_all(&d).unwrap();
        synth(&d, 20);
        ok(&patsim(&["segment", "--corpus", &s(&d.join("c.jsonl")), "--out", &s(&d.join("seg.jsonl"))]));
        ok(&patsim(&["vectorize", "--corpus", &s(&d.join("c.jsonl")), "--dim", "7", "--out", &s(&d.join("m.jsonl"))]));
        ["c.jsonl", "ann.csv", "seg.jsonl", "m.jsonl"].map(|f| std::fs::read(d.join(f)).unwrap())
    };
    assert_eq!(run("a"), run("b"));
}
