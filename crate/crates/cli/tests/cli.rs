#[path = "../../core/tests/common/mod.rs"]
mod common;

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::json;
use sqlagents_core::agents;
use sqlagents_core::backend::Fixture;
use sqlagents_core::model::FeedbackKind;
use sqlagents_core::{PipelineConfig, QuestionSample};

use common::{concert_db, fenced, sample};

fn sqlagents(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sqlagents"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn write_dataset(path: &Path, samples: &[QuestionSample]) {
    let records: Vec<_> = samples
        .iter()
        .map(|s| {
            json!({
                "question_id": s.id,
                "question": s.question,
                "db_id": s.db_id,
                "evidence": s.evidence,
                "SQL": s.gold_sql,
                "difficulty": s.difficulty,
            })
        })
        .collect();
    std::fs::write(path, serde_json::to_string_pretty(&records).unwrap()).unwrap();
}

struct Bench {
    _dir: tempfile::TempDir,
    root: PathBuf,
    db_root: PathBuf,
    dataset: PathBuf,
    fixture: PathBuf,
}

impl Bench {
    fn arg(p: &Path) -> &str {
        p.to_str().unwrap()
    }

    fn run(&self, out: &str) -> Output {
        sqlagents(&[
            "run",
            "--dataset",
            Self::arg(&self.dataset),
            "--db-root",
            Self::arg(&self.db_root),
            "--scripted",
            Self::arg(&self.fixture),
            "--candidates",
            "10",
            "--subset-size",
            "5",
            "--timeout",
            "10",
            "--out",
            Self::arg(&self.root.join(out)),
        ])
    }
}

fn five_question_bench() -> Bench {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_path_buf();
    let db_root = root.join("db");
    concert_db(&db_root);
    let (samples, fixture, config) = common::five_question_benchmark(&db_root);
    assert_eq!((config.candidates, config.subset_size), (10, 5));
    let dataset = root.join("dev.json");
    write_dataset(&dataset, &samples);
    let fixture_path = root.join("fixture.json");
    fixture.save(&fixture_path).unwrap();
    Bench {
        _dir: dir,
        root,
        db_root,
        dataset,
        fixture: fixture_path,
    }
}

#[test]
fn run_prints_ex_and_is_reproducible() {
    let b = five_question_bench();
    let first = b.run("a");
    assert!(first.status.success(), "{}", stderr(&first));
    assert!(stdout(&first).contains("EX: 100.00%"), "{}", stdout(&first));
    let second = b.run("b");
    assert!(second.status.success(), "{}", stderr(&second));
    for file in ["results.jsonl", "summary.json"] {
        let x = std::fs::read(b.root.join("a").join(file)).unwrap();
        let y = std::fs::read(b.root.join("b").join(file)).unwrap();
        assert_eq!(x, y, "{file} differs between reruns");
    }
    let snapshot: serde_json::Value =
        serde_json::from_slice(&std::fs::read(b.root.join("a/config.json")).unwrap()).unwrap();
    assert_eq!(snapshot["pipeline"]["candidates"], 10);
    assert_eq!(snapshot["backends"]["default"]["kind"], "scripted");
    assert!(b.root.join("a/timings.jsonl").is_file());
}

#[test]
fn missing_db_root_is_a_usage_error() {
    let b = five_question_bench();
    let o = sqlagents(&[
        "run",
        "--dataset",
        Bench::arg(&b.dataset),
        "--scripted",
        Bench::arg(&b.fixture),
        "--out",
        Bench::arg(&b.root.join("out")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("db_root"), "{}", stderr(&o));
    assert!(!b.root.join("out").exists());
}

#[test]
fn bad_config_field_is_named() {
    let b = five_question_bench();
    let o = sqlagents(&[
        "run",
        "--dataset",
        Bench::arg(&b.dataset),
        "--db-root",
        Bench::arg(&b.db_root),
        "--scripted",
        Bench::arg(&b.fixture),
        "--candidates",
        "0",
        "--out",
        Bench::arg(&b.root.join("out")),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("candidates"), "{}", stderr(&o));
}

#[test]
fn eval_agrees_with_run_summary() {
    let b = five_question_bench();
    assert!(b.run("a").status.success());
    let results = b.root.join("a/results.jsonl");
    let o = sqlagents(&[
        "eval",
        "--results",
        Bench::arg(&results),
        "--dataset",
        Bench::arg(&b.dataset),
        "--db-root",
        Bench::arg(&b.db_root),
        "--ves",
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.contains("EX: 100.00% over 5 samples"), "{out}");
    assert!(out.contains("VES: "), "{out}");
    let eval: serde_json::Value =
        serde_json::from_slice(&std::fs::read(b.root.join("a/eval.json")).unwrap()).unwrap();
    let summary: serde_json::Value =
        serde_json::from_slice(&std::fs::read(b.root.join("a/summary.json")).unwrap()).unwrap();
    assert_eq!(eval["ex"], summary["ex"]);
    assert!(eval["ves"].as_f64().unwrap() >= 0.0);
    let tsv = std::fs::read_to_string(b.root.join("a/breakdown.tsv")).unwrap();
    assert!(tsv.starts_with("axis\tbucket\ttotal\tmatched\tex\n"));
    assert!(b.root.join("a/breakdown.json").is_file());
}

#[test]
fn eval_ts_needs_variants_and_counts_them() {
    let b = five_question_bench();
    assert!(b.run("a").status.success());
    let results = b.root.join("a/results.jsonl");
    let base = [
        "eval",
        "--results",
        Bench::arg(&results),
        "--dataset",
        Bench::arg(&b.dataset),
        "--db-root",
        Bench::arg(&b.db_root),
    ];
    let o = sqlagents(&[&base[..], &["--ts"]].concat());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("--variants"));

    // the original database as its own variant keeps TS equal to EX
    let variants = b.root.join("variants");
    std::fs::create_dir_all(variants.join(common::DB_ID)).unwrap();
    std::fs::copy(
        b.db_root
            .join(common::DB_ID)
            .join(format!("{}.sqlite", common::DB_ID)),
        variants.join(common::DB_ID).join("v0.sqlite"),
    )
    .unwrap();
    let o = sqlagents(&[&base[..], &["--ts", "--variants", Bench::arg(&variants)]].concat());
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).contains("TS: 100.00% (5/5"), "{}", stdout(&o));
}

#[test]
fn eval_lists_orphans() {
    let b = five_question_bench();
    assert!(b.run("a").status.success());
    let mut samples = common::five_question_benchmark(&b.db_root).0;
    samples.truncate(4);
    samples.push(sample("extra", "Anything?", "SELECT 1"));
    let other = b.root.join("other.json");
    write_dataset(&other, &samples);
    let o = sqlagents(&[
        "eval",
        "--results",
        Bench::arg(&b.root.join("a/results.jsonl")),
        "--dataset",
        Bench::arg(&other),
        "--db-root",
        Bench::arg(&b.db_root),
    ]);
    assert_eq!(o.status.code(), Some(1));
    let err = stderr(&o);
    assert!(err.contains("q5") && err.contains("extra"), "{err}");
}

const GOLD: &str = "SELECT name FROM singer WHERE country = 'France'";
const WRONG: &str = "SELECT name FROM singer WHERE country = 'france'";

/// Fixture for one sample with two actions per observation.
fn rlef_fixture(db_root: &Path, s: &QuestionSample) -> Fixture {
    let ctx = common::context(db_root, &PipelineConfig::default(), s);
    let resp = common::exec(&ctx, WRONG);
    let hint = "HINT: country values are capitalized. The SQL is incorrect.";
    let mut f = Fixture::default();
    let planner = agents::planner_prompt(&ctx);
    f.push(&planner, 2, 1.0, vec![fenced(GOLD), fenced(WRONG)]);
    f.push_one(&planner, 1, 0.0, fenced(WRONG));
    let sel = agents::validator_prompt(FeedbackKind::Selection, &ctx, WRONG, &resp);
    let cond = agents::validator_prompt(FeedbackKind::Condition, &ctx, WRONG, &resp);
    f.push(
        &sel,
        2,
        1.0,
        vec!["Fine. The SQL is correct.".into(), hint.into()],
    );
    f.push(
        &cond,
        2,
        1.0,
        vec!["Fine c. The SQL is correct.".into(), "Unsure c.".into()],
    );
    let fix = agents::fix_prompt(&ctx, WRONG, &resp, &[hint]);
    f.push_one(&fix, 1, 0.0, fenced(GOLD));
    f.push_one(&sel, 1, 0.0, hint);
    f.push_one(&cond, 1, 0.0, "Fine. The SQL is correct.");
    f.push(&fix, 2, 1.0, vec![fenced(GOLD), fenced(WRONG)]);
    f
}

#[test]
fn build_rlef_writes_pairs_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let db_root = dir.path().join("db");
    concert_db(&db_root);
    let s = sample("r1", "Which singers are from France?", GOLD);
    let dataset = dir.path().join("train.json");
    write_dataset(&dataset, std::slice::from_ref(&s));
    let fixture = dir.path().join("fixture.json");
    rlef_fixture(&db_root, &s).save(&fixture).unwrap();
    let out = dir.path().join("rlef");
    let run = |iteration: &str| {
        sqlagents(&[
            "build-rlef",
            "--dataset",
            dataset.to_str().unwrap(),
            "--db-root",
            db_root.to_str().unwrap(),
            "--scripted",
            fixture.to_str().unwrap(),
            "--actions",
            "2",
            "--iteration",
            iteration,
            "--out",
            out.to_str().unwrap(),
        ])
    };
    let first = run("1");
    assert!(first.status.success(), "{}", stderr(&first));
    assert!(
        stderr(&first).contains("no advanced backend"),
        "{}",
        stderr(&first)
    );
    for (kind, n) in [
        ("planner", 1),
        ("validator_selection", 1),
        ("validator_condition", 1),
        ("fix", 1),
    ] {
        let text = std::fs::read_to_string(out.join("iter_1").join(format!("pairs_{kind}.jsonl")))
            .unwrap();
        assert_eq!(text.lines().count(), n, "{kind}");
    }
    let sel = std::fs::read_to_string(out.join("iter_1/pairs_validator_selection.jsonl")).unwrap();
    let pair: serde_json::Value = serde_json::from_str(sel.trim()).unwrap();
    assert!(pair["chosen"].as_str().unwrap().starts_with("HINT"));
    assert!(stdout(&first).contains("recommendation: continue"));

    // same counts again: relative change 0 is below the threshold
    let second = run("2");
    assert!(second.status.success(), "{}", stderr(&second));
    assert!(
        stdout(&second).contains("recommendation: stop"),
        "{}",
        stdout(&second)
    );
    let manifest: serde_json::Value =
        serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["iterations"].as_array().unwrap().len(), 2);
    assert_eq!(manifest["iterations"][1]["stop"], true);
}

#[test]
fn build_rlef_requires_gold() {
    let dir = tempfile::tempdir().unwrap();
    let db_root = dir.path().join("db");
    concert_db(&db_root);
    let mut s = sample("r1", "Which singers are from France?", GOLD);
    s.gold_sql = None;
    let dataset = dir.path().join("test.json");
    write_dataset(&dataset, &[s]);
    let fixture = dir.path().join("fixture.json");
    Fixture::default().save(&fixture).unwrap();
    let o = sqlagents(&[
        "build-rlef",
        "--dataset",
        dataset.to_str().unwrap(),
        "--db-root",
        db_root.to_str().unwrap(),
        "--scripted",
        fixture.to_str().unwrap(),
        "--out",
        dir.path().join("rlef").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("no gold SQL"), "{}", stderr(&o));
}

fn orpo_file(dir: &Path, lines: &[String]) -> PathBuf {
    let p = dir.join("scored.jsonl");
    std::fs::write(&p, lines.join("\n") + "\n").unwrap();
    p
}

fn score_rows(out: &str) -> Vec<Vec<f64>> {
    out.lines()
        .skip(1)
        .filter(|l| !l.starts_with("mean"))
        .map(|l| l.split('\t').skip(1).map(|x| x.parse().unwrap()).collect())
        .collect()
}

#[test]
fn orpo_score_identity_and_lambda_zero() {
    let dir = tempfile::tempdir().unwrap();
    let lines = vec![
        json!({"chosen_logprobs": [-0.5, -1.0], "rejected_logprobs": [-0.5, -1.0]}).to_string(),
        json!({"chosen_logprobs": [-3.0, -0.2, -0.1], "rejected_logprobs": [-3.0, -0.2, -0.1], "boundary": 1}).to_string(),
    ];
    let p = orpo_file(dir.path(), &lines);
    let o = sqlagents(&["orpo-score", p.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    for row in score_rows(&stdout(&o)) {
        assert!((row[2] - std::f64::consts::LN_2).abs() < 1e-9, "{row:?}");
    }

    let lines = vec![
        json!({"chosen_logprobs": [-0.5, -1.0], "rejected_logprobs": [-2.0], "lambda": 3.0})
            .to_string(),
        json!({"chosen_logprobs": [-0.1], "rejected_logprobs": [-0.1, -4.0]}).to_string(),
    ];
    let p = orpo_file(dir.path(), &lines);
    let out = dir.path().join("scores.jsonl");
    let o = sqlagents(&[
        "orpo-score",
        p.to_str().unwrap(),
        "--lambda",
        "0",
        "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    for row in score_rows(&stdout(&o)) {
        assert_eq!(row[0], row[1], "{row:?}");
    }
    assert_eq!(std::fs::read_to_string(&out).unwrap().lines().count(), 2);
}

#[test]
fn orpo_score_hand_values() {
    // one-token sequences with likelihoods 0.8 and 0.2: odds 4 and 1/4
    let dir = tempfile::tempdir().unwrap();
    let line =
        json!({"chosen_logprobs": [0.8f64.ln()], "rejected_logprobs": [0.2f64.ln()]}).to_string();
    let p = orpo_file(dir.path(), &[line]);
    let o = sqlagents(&["orpo-score", p.to_str().unwrap(), "--lambda", "0.5"]);
    assert!(o.status.success());
    let row = &score_rows(&stdout(&o))[0];
    let nll = -(0.8f64.ln());
    let or = (1.0 + (-(16f64.ln())).exp()).ln();
    assert!(
        (row[1] - nll).abs() < 1e-9 && (row[2] - or).abs() < 1e-9,
        "{row:?}"
    );
    assert!((row[0] - (nll + 0.5 * or)).abs() < 1e-9);
}

#[test]
fn orpo_score_reports_bad_line() {
    let dir = tempfile::tempdir().unwrap();
    let lines = vec![
        json!({"chosen_logprobs": [-0.5], "rejected_logprobs": [-1.0]}).to_string(),
        "{\"chosen_logprobs\": [0.5], \"rejected_logprobs\": [-1.0]}".to_string(),
    ];
    let p = orpo_file(dir.path(), &lines);
    let o = sqlagents(&["orpo-score", p.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("line 2"), "{}", stderr(&o));
}
