use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use ecgqa_core::io_util::content_hash;
use ecgqa_core::metrics::MetricReport;
use serde_json::Value;
use tempfile::TempDir;

fn ecgqa(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ecgqa"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(dir: &Path, args: &[&str]) -> String {
    let out = ecgqa(dir, args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn fails(dir: &Path, args: &[&str], code: i32) -> String {
    let out = ecgqa(dir, args);
    assert_eq!(out.status.code(), Some(code), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stderr).unwrap()
}

fn read(path: impl AsRef<Path>) -> Vec<u8> {
    std::fs::read(path.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", path.as_ref().display()))
}

/// Dataset `d` with `n` records and its index `idx.ecix`.
fn dataset(n: usize) -> TempDir {
    let t = TempDir::new().unwrap();
    let n = n.to_string();
    ok(
        t.path(),
        &["synth-fixtures", "--out", "d", "--n", &n, "--len", "1200", "--seed", "3"],
    );
    ok(t.path(), &["build-index", "--data", "d", "--out", "idx.ecix", "--seed", "3"]);
    t
}

fn meta(path: impl AsRef<Path>) -> Value {
    let mut p = path.as_ref().as_os_str().to_owned();
    p.push(".meta.json");
    serde_json::from_slice(&read(PathBuf::from(p))).unwrap()
}

#[test]
fn help_covers_every_command() {
    let t = TempDir::new().unwrap();
    let top = ok(t.path(), &["--help"]);
    for cmd in ["synth-fixtures", "build-index", "ask", "train", "eval", "grad-check", "bench-index"] {
        assert!(top.contains(cmd), "{cmd} missing from --help");
        let sub = ok(t.path(), &[cmd, "--help"]);
        assert!(sub.contains("--seed") && sub.contains("--config"), "{cmd}");
    }
}

#[test]
fn exit_codes_separate_validation_from_io() {
    let t = TempDir::new().unwrap();
    fails(t.path(), &["no-such-command"], 1);
    fails(t.path(), &["synth-fixtures", "--out", "d", "--n", "0"], 1);
    fails(t.path(), &["build-index", "--data", "missing", "--out", "i"], 2);
    fails(t.path(), &["synth-fixtures", "--out", "d", "--set", "novalue"], 1);
    std::fs::write(t.path().join("bad.conf"), "no equals sign\n").unwrap();
    fails(t.path(), &["synth-fixtures", "--out", "d", "--config", "bad.conf"], 2);
}

#[test]
fn synth_is_reproducible_and_covers_every_rule() {
    let t = TempDir::new().unwrap();
    ok(t.path(), &["synth-fixtures", "--out", "a", "--n", "10", "--seed", "4"]);
    ok(t.path(), &["synth-fixtures", "--out", "b", "--n", "10", "--seed", "4"]);
    let ecg: Vec<_> = std::fs::read_dir(t.path().join("a/ecg")).unwrap().collect();
    assert_eq!(ecg.len(), 10);
    for f in ["reports.jsonl", "qa.jsonl", "vocab.txt", "fixtures.meta.json", "ecg/0007.ecgr"] {
        assert_eq!(read(t.path().join("a").join(f)), read(t.path().join("b").join(f)), "{f}");
    }
    let reports = String::from_utf8(read(t.path().join("a/reports.jsonl"))).unwrap();
    assert_eq!(reports.lines().count(), 10);
    let qa = String::from_utf8(read(t.path().join("a/qa.jsonl"))).unwrap();
    assert!(qa.lines().count() >= 30);
    for needle in [
        "single-verify",
        "single-choose",
        "single-query",
        "What leads",
        "What numeric features",
        "What range",
    ] {
        assert!(qa.contains(needle), "{needle}");
    }
    let m: Value = serde_json::from_slice(&read(t.path().join("a/fixtures.meta.json"))).unwrap();
    assert_eq!(m["seed"], 4);
    assert_eq!(m["files"]["qa.jsonl"], content_hash(qa.as_bytes()));
}

#[test]
fn build_index_reports_counts_and_rebuilds_identically() {
    let t = TempDir::new().unwrap();
    ok(t.path(), &["synth-fixtures", "--out", "d", "--n", "10", "--len", "1200"]);
    let out = ok(t.path(), &["build-index", "--data", "d", "--out", "a.ecix"]);
    assert_eq!(out.trim(), "indexed 10 reports, dim 32");
    ok(t.path(), &["build-index", "--data", "d", "--out", "b.ecix"]);
    let a = read(t.path().join("a.ecix"));
    assert_eq!(a, read(t.path().join("b.ecix")));
    let m = meta(t.path().join("a.ecix"));
    assert_eq!(m["content_hash"], content_hash(&a));
    assert_eq!(m["seed"], 0);
    assert_eq!(m["config"]["encoder.d_out"], "32");
    ok(t.path(), &["build-index", "--data", "d", "--out", "c.ecix", "--seed", "1"]);
    assert_ne!(a, read(t.path().join("c.ecix")));
}

#[test]
fn config_file_and_set_override_defaults() {
    let t = TempDir::new().unwrap();
    ok(t.path(), &["synth-fixtures", "--out", "d", "--n", "3", "--len", "1200"]);
    std::fs::write(t.path().join("run.conf"), "# smaller encoder\nencoder.d_out = 16\nseed = 5\n").unwrap();
    let out = ok(t.path(), &["build-index", "--data", "d", "--out", "i", "--config", "run.conf"]);
    assert!(out.contains("dim 16"), "{out}");
    assert_eq!(meta(t.path().join("i"))["seed"], 5);
    let out = ok(
        t.path(),
        &[
            "build-index",
            "--data",
            "d",
            "--out",
            "i",
            "--config",
            "run.conf",
            "--set",
            "encoder.d_out=8",
        ],
    );
    assert!(out.contains("dim 8"), "{out}");
}

#[test]
fn missing_report_names_the_record() {
    let t = TempDir::new().unwrap();
    ok(t.path(), &["synth-fixtures", "--out", "d", "--n", "4", "--len", "1200"]);
    let path = t.path().join("d/reports.jsonl");
    let text = String::from_utf8(read(&path)).unwrap();
    let kept: String = text
        .lines()
        .filter(|l| !l.contains("0002.ecgr"))
        .map(|l| format!("{l}\n"))
        .collect();
    std::fs::write(&path, kept).unwrap();
    let err = fails(t.path(), &["build-index", "--data", "d", "--out", "i"], 1);
    assert!(err.contains("ecg/0002.ecgr"), "{err}");
}

const VERIFY: [&str; 4] = ["--qtype", "single-verify", "--question", "Does this ECG show sinus rhythm?"];

#[test]
fn ask_retrieves_itself_first() {
    let t = dataset(4);
    let mut args = vec!["ask", "--data", "d", "--index", "idx.ecix", "--ecg", "d/ecg/0002.ecgr"];
    args.extend(VERIFY);
    let out = ok(t.path(), &args);
    assert!(out.contains("retrieved 3 report(s)"), "{out}");
    let first = out.lines().nth(1).unwrap();
    assert!(first.starts_with("  1. id 2 score 1.000000"), "{first}");
    assert!(out.contains("Question: Does this ECG show sinus rhythm?"));
    assert!(out.contains("Options: yes, no, not sure"));
    assert!(out.lines().any(|l| l.starts_with("answer: ")));
}

#[test]
fn ask_clamps_k_and_rejects_an_empty_index() {
    let t = dataset(2);
    let mut args = vec!["ask", "--data", "d", "--index", "idx.ecix", "--ecg", "d/ecg/0000.ecgr", "--k", "3"];
    args.extend(VERIFY);
    let out = ok(t.path(), &args);
    assert!(out.contains("retrieved 2 report(s)"), "{out}");

    let empty = t.path().join("e");
    std::fs::create_dir_all(empty.join("ecg")).unwrap();
    std::fs::write(empty.join("reports.jsonl"), "").unwrap();
    std::fs::copy(t.path().join("d/vocab.txt"), empty.join("vocab.txt")).unwrap();
    let out = ok(t.path(), &["build-index", "--data", "e", "--out", "empty.ecix"]);
    assert!(out.contains("indexed 0 reports"));
    let mut args = vec!["ask", "--data", "d", "--index", "empty.ecix", "--ecg", "d/ecg/0000.ecgr"];
    args.extend(VERIFY);
    let err = fails(t.path(), &args, 1);
    assert!(err.contains("index is empty"), "{err}");
}

#[test]
fn ask_matches_the_golden_transcript() {
    let t = dataset(3);
    ok(
        t.path(),
        &[
            "train",
            "--data",
            "d",
            "--index",
            "idx.ecix",
            "--out",
            "run",
            "--epochs",
            "1",
            "--batch-size",
            "4",
        ],
    );
    let out = ok(
        t.path(),
        &[
            "ask",
            "--data",
            "d",
            "--index",
            "idx.ecix",
            "--checkpoint",
            "run/best.ecpt",
            "--ecg",
            "d/ecg/0001.ecgr",
            "--qtype",
            "single-choose",
            "--question",
            "Which rhythm does this ECG show, sinus rhythm or atrial fibrillation?",
            "--attribute",
            "sinus rhythm",
            "--attribute",
            "atrial fibrillation",
            "--max-tokens",
            "6",
        ],
    );
    let golden = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden/ask.txt");
    if std::env::var_os("UPDATE_GOLDEN").is_some() {
        std::fs::write(&golden, &out).unwrap();
    }
    let expected = String::from_utf8(read(&golden)).unwrap();
    assert_eq!(out, expected);
}

fn csv_rows(path: impl AsRef<Path>) -> Vec<String> {
    String::from_utf8(read(path)).unwrap().lines().skip(1).map(str::to_string).collect()
}

#[test]
fn train_logs_every_epoch_and_resumes_exactly() {
    let t = dataset(3);
    let train = [
        "train",
        "--data",
        "d",
        "--index",
        "idx.ecix",
        "--epochs",
        "5",
        "--batch-size",
        "4",
        "--val-fraction",
        "0.34",
    ];
    let mut full = train.to_vec();
    full.extend(["--out", "full"]);
    ok(t.path(), &full);
    let rows = csv_rows(t.path().join("full/train_log.csv"));
    assert_eq!(rows.len(), 5);
    for f in ["best.ecpt", "last.ecpt", "train_log.csv"] {
        let p = t.path().join("full").join(f);
        assert_eq!(meta(&p)["content_hash"], content_hash(&read(&p)), "{f}");
    }

    let mut part = train.to_vec();
    part.extend(["--out", "part", "--stop-after", "2"]);
    let out = ok(t.path(), &part);
    assert!(out.contains("--resume"));
    assert_eq!(csv_rows(t.path().join("part/train_log.csv")), rows[..2]);
    let mut resume = train.to_vec();
    resume.extend(["--out", "part", "--resume"]);
    ok(t.path(), &resume);
    for f in ["train_log.csv", "best.ecpt", "last.ecpt"] {
        assert_eq!(read(t.path().join("part").join(f)), read(t.path().join("full").join(f)), "{f}");
    }

    let mut changed = resume.clone();
    changed.extend(["--lr", "0.01"]);
    let err = fails(t.path(), &changed, 1);
    assert!(err.contains("resume"), "{err}");
}

fn metrics(dir: &Path) -> MetricReport {
    MetricReport::from_json(&String::from_utf8(read(dir.join("metrics.json"))).unwrap()).unwrap()
}

#[test]
fn oracle_eval_scores_one_and_subsets_are_seeded() {
    let t = dataset(12);
    let out = ok(t.path(), &["eval", "--data", "d", "--index", "idx.ecix", "--oracle", "--out", "ev"]);
    assert!(out.contains("EM-Acc"));
    let r = metrics(&t.path().join("ev"));
    assert_eq!(r.avg.em_acc, 1.0);
    for s in r.per_type.values() {
        assert_eq!(s.em_acc, 1.0);
    }
    assert!(t.path().join("ev/metrics.txt").is_file());
    assert!(t.path().join("ev/predictions.jsonl.meta.json").is_file());

    let sub = |out: &str, seed: &str| {
        ok(
            t.path(),
            &[
                "eval", "--data", "d", "--index", "idx.ecix", "--oracle", "--out", out, "--subset", "0.1", "--seed", seed,
            ],
        );
        read(t.path().join(out).join("predictions.jsonl"))
    };
    let a = sub("s1", "8");
    assert_eq!(a, sub("s2", "8"));
    assert_ne!(a, sub("s3", "9"));
    let n = String::from_utf8(a).unwrap().lines().count();
    assert!(n < 48 / 2, "{n}");
}

#[test]
fn eval_without_a_question_type_is_incomplete() {
    let t = dataset(3);
    let path = t.path().join("d/qa.jsonl");
    let text = String::from_utf8(read(&path)).unwrap();
    let kept: String = text
        .lines()
        .filter(|l| !l.contains("single-query"))
        .map(|l| format!("{l}\n"))
        .collect();
    std::fs::write(&path, kept).unwrap();
    let err = fails(
        t.path(),
        &["eval", "--data", "d", "--index", "idx.ecix", "--oracle", "--out", "ev"],
        1,
    );
    assert!(err.contains("incomplete evaluation: single-query"), "{err}");
}

#[test]
fn an_overfit_checkpoint_answers_its_training_set() {
    let t = dataset(2);
    ok(
        t.path(),
        &[
            "train",
            "--data",
            "d",
            "--index",
            "idx.ecix",
            "--out",
            "run",
            "--epochs",
            "1",
            "--batch-size",
            "8",
            "--max-steps",
            "300",
            "--lr",
            "2e-3",
        ],
    );
    ok(
        t.path(),
        &[
            "eval",
            "--data",
            "d",
            "--index",
            "idx.ecix",
            "--checkpoint",
            "run/best.ecpt",
            "--out",
            "ev",
        ],
    );
    let r = metrics(&t.path().join("ev"));
    assert!(r.avg.em_acc >= 0.95, "{}", r.to_table());
    assert_eq!(r.label, "Full");
}

#[test]
fn grad_check_and_bench_index_run() {
    let t = TempDir::new().unwrap();
    let out = ok(t.path(), &["grad-check", "--seeds", "1"]);
    assert!(out.lines().filter(|l| l.ends_with("PASS")).count() >= 20, "{out}");
    assert!(!out.contains("FAIL"));
    let out = ok(t.path(), &["bench-index", "--n", "500", "--dim", "8", "--queries", "5", "--k", "3"]);
    assert!(out.contains("15 hits"), "{out}");
}
