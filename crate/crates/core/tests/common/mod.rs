//! Toy databases and scripted fixtures shared by the integration tests.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::sync::Arc;

use rusqlite::Connection;
use sqlagents_core::agents::{self, AgentContext};
use sqlagents_core::backend::{constant_backend, Fixture};
use sqlagents_core::executor::execute_sql;
use sqlagents_core::model::{ExecutionResponse, FeedbackKind, QuestionSample, SqlCandidate};
use sqlagents_core::pipeline::{Backends, Pipeline, PipelineConfig};

pub const DB_ID: &str = "concert";

/// Creates `<root>/concert/concert.sqlite`.
pub fn concert_db(root: &Path) -> PathBuf {
    let dir = root.join(DB_ID);
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join(format!("{DB_ID}.sqlite"));
    let conn = Connection::open(&path).unwrap();
    conn.execute_batch(
        "CREATE TABLE singer (
             singer_id INTEGER PRIMARY KEY,
             name TEXT,
             country TEXT,
             age INTEGER
         );
         CREATE TABLE concert (
             concert_id INTEGER PRIMARY KEY,
             concert_name TEXT,
             year INTEGER
         );
         CREATE TABLE performance (
             concert_id INTEGER REFERENCES concert(concert_id),
             singer_id INTEGER REFERENCES singer(singer_id)
         );
         INSERT INTO singer VALUES
             (1, 'Ann', 'France', 30),
             (2, 'Bob', 'Spain', 41),
             (3, 'Cid', 'France', 25),
             (4, 'Dee', NULL, 52),
             (5, 'Eve', 'Spain', 36);
         INSERT INTO concert VALUES (1, 'Spring Gala', 2014), (2, 'Summer Nights', 2015);
         INSERT INTO performance VALUES (1, 1), (1, 2), (2, 2), (2, 5);",
    )
    .unwrap();
    path
}

pub fn sample(id: &str, question: &str, gold: &str) -> QuestionSample {
    QuestionSample {
        id: id.into(),
        question: question.into(),
        db_id: DB_ID.into(),
        evidence: None,
        gold_sql: Some(gold.into()),
        difficulty: None,
    }
}

pub fn fenced(sql: &str) -> String {
    format!("Plan: answer the question.\n```sql\n{sql}\n```")
}

/// Agent context exactly as the pipeline builds it.
pub fn context(db_root: &Path, config: &PipelineConfig, sample: &QuestionSample) -> AgentContext {
    Pipeline::new(
        config.clone(),
        Backends::uniform(constant_backend("")),
        db_root,
    )
    .build_context(sample)
    .unwrap()
    .0
}

pub fn exec(ctx: &AgentContext, sql: &str) -> ExecutionResponse {
    execute_sql(&ctx.db_path, sql, 5.0).unwrap()
}

fn candidate(sql: &str) -> SqlCandidate {
    SqlCandidate {
        plan: String::new(),
        sql: sql.into(),
        origin: sqlagents_core::model::Origin::Greedy,
        temperature: 0.0,
    }
}

/// Queues fixture replies for one pipeline question.
pub struct QuestionScript<'a> {
    pub fixture: &'a mut Fixture,
    pub ctx: AgentContext,
    pub temperature: f64,
}

impl QuestionScript<'_> {
    /// Greedy completion followed by one sampled batch.
    pub fn planner(&mut self, greedy: &str, sampled: &[&str]) {
        let prompt = agents::planner_prompt(&self.ctx);
        self.fixture.push_one(&prompt, 1, 0.0, fenced(greedy));
        if !sampled.is_empty() {
            self.fixture.push(
                &prompt,
                sampled.len(),
                self.temperature,
                sampled.iter().map(|s| fenced(s)).collect(),
            );
        }
    }

    /// Validator replies for one candidate. The selection reply is only
    /// queued when the gate would not skip the call.
    pub fn validators(&mut self, sql: &str, selection: &str, condition: &str) {
        let resp = exec(&self.ctx, sql);
        if !agents::selection_gated(sql) {
            let p = agents::validator_prompt(FeedbackKind::Selection, &self.ctx, sql, &resp);
            self.fixture.push_one(&p, 1, 0.0, selection);
        }
        let p = agents::validator_prompt(FeedbackKind::Condition, &self.ctx, sql, &resp);
        self.fixture.push_one(&p, 1, 0.0, condition);
    }

    pub fn fix(&mut self, sql: &str, feedback: &[&str], repaired: &str) {
        let resp = exec(&self.ctx, sql);
        let p = agents::fix_prompt(&self.ctx, sql, &resp, feedback);
        self.fixture.push_one(&p, 1, 0.0, fenced(repaired));
    }

    /// Selection reply for a chunk showing `sqls` in order.
    pub fn select(&mut self, sqls: &[&str], answer: &str) {
        let cands: Vec<SqlCandidate> = sqls.iter().map(|s| candidate(s)).collect();
        let resps: Vec<ExecutionResponse> = sqls.iter().map(|s| exec(&self.ctx, s)).collect();
        let shown: Vec<_> = cands.iter().zip(&resps).collect();
        let p = agents::selection_prompt(&self.ctx, &shown);
        self.fixture.push_one(&p, 1, 0.0, answer);
    }
}

fn script<'a>(
    fixture: &'a mut Fixture,
    db_root: &Path,
    config: &PipelineConfig,
    s: &QuestionSample,
) -> QuestionScript<'a> {
    QuestionScript {
        fixture,
        ctx: context(db_root, config, s),
        temperature: config.temperature,
    }
}

pub const OK: &str = "The columns and conditions fit the question. The SQL is correct.";

/// Five questions with K = 10 covering the selection gate, a
/// validate-then-fix repair of an empty result, a three-call selection
/// tournament, a greedy fallback after "none", and repair of a query that
/// fails to execute. Returns the samples, the fixture and the config.
pub fn five_question_benchmark(db_root: &Path) -> (Vec<QuestionSample>, Fixture, PipelineConfig) {
    let config = PipelineConfig {
        candidates: 10,
        subset_size: 5,
        timeout_secs: 10.0,
        ..PipelineConfig::default()
    };
    let mut q5 = sample(
        "q5",
        "How many singers come from Spain?",
        "SELECT count(*) FROM singer WHERE country = 'Spain'",
    );
    q5.evidence = Some("Spain refers to country = 'Spain'".into());
    let samples = vec![
        sample(
            "q1",
            "How many singers are there?",
            "SELECT count(*) FROM singer",
        ),
        sample(
            "q2",
            "Which singers are from France?",
            "SELECT name FROM singer WHERE country = 'France'",
        ),
        sample(
            "q3",
            "What are the names of singers older than 40?",
            "SELECT name FROM singer WHERE age > 40",
        ),
        sample(
            "q4",
            "What is the name of the youngest singer?",
            "SELECT name FROM singer ORDER BY age LIMIT 1",
        ),
        q5,
    ];
    let mut fixture = Fixture::default();

    // q1: every candidate counts rows; the selection validator is gated and
    // deduplication leaves a single candidate.
    {
        let mut q = script(&mut fixture, db_root, &config, &samples[0]);
        let a = "SELECT count(*) FROM singer";
        let b = "select COUNT(*)  from singer";
        let sampled = [a, b, a, b, a, b, a, b, a];
        q.planner(a, &sampled);
        for sql in std::iter::once(a).chain(sampled) {
            q.validators(sql, OK, OK);
        }
    }

    // q2: a lower-case literal returns nothing; the condition validator
    // flags it and the fix agent restores the literal.
    {
        let mut q = script(&mut fixture, db_root, &config, &samples[1]);
        let bad = "SELECT name FROM singer WHERE country = 'france'";
        let good = "SELECT name FROM singer WHERE country = 'France'";
        let flag = "The result is an empty set, so the condition is likely wrong: country values are capitalized, e.g. 'France'. The SQL is incorrect.";
        q.planner(bad, &[bad; 9]);
        for _ in 0..10 {
            q.validators(bad, OK, flag);
            q.fix(bad, &[flag], good);
        }
    }

    // q3: ten distinct thresholds; the tournament picks the sixth sampled
    // candidate over two chunks and a final.
    {
        let mut q = script(&mut fixture, db_root, &config, &samples[2]);
        let sqls: Vec<String> = [
            "> 30", "> 20", "> 24", "> 26", "> 28", "> 35", "> 40", "> 45", "> 50", ">= 53",
        ]
        .iter()
        .map(|t| format!("SELECT name FROM singer WHERE age {t}"))
        .collect();
        let refs: Vec<&str> = sqls.iter().map(String::as_str).collect();
        q.planner(refs[0], &refs[1..]);
        for sql in &refs {
            q.validators(sql, OK, OK);
        }
        q.select(&refs[0..5], "All similar; the first one.\n1");
        q.select(
            &refs[5..10],
            "Candidate 2 uses the threshold from the question.\n2",
        );
        q.select(&[refs[0], refs[6]], "The second candidate.\n2");
    }

    // q4: three distinct candidates, selection rejects them all and the
    // greedy candidate is kept.
    {
        let mut q = script(&mut fixture, db_root, &config, &samples[3]);
        let greedy = "SELECT name FROM singer ORDER BY age LIMIT 1";
        let desc = "SELECT name FROM singer ORDER BY age DESC LIMIT 1";
        let first = "SELECT name FROM singer LIMIT 1";
        let sampled = [desc, first, desc, first, desc, first, desc, first, desc];
        q.planner(greedy, &sampled);
        for sql in std::iter::once(greedy).chain(sampled) {
            q.validators(sql, OK, OK);
        }
        q.select(&[greedy, desc, first], "none");
    }

    // q5: the greedy query names a missing table; the fix agent repairs it
    // and the repaired query deduplicates with the sampled ones.
    {
        let mut q = script(&mut fixture, db_root, &config, &samples[4]);
        let broken = "SELECT count(*) FROM singers WHERE country = 'Spain'";
        let good = "SELECT count(*) FROM singer WHERE country = 'Spain'";
        let flag = "Execution failed because table singers does not exist; use singer. The SQL is incorrect.";
        q.planner(broken, &[good; 9]);
        q.validators(broken, OK, flag);
        q.fix(broken, &[flag], good);
        for _ in 0..9 {
            q.validators(good, OK, OK);
        }
    }

    (samples, fixture, config)
}

pub fn arc<B: sqlagents_core::backend::Backend + 'static>(b: B) -> Arc<B> {
    Arc::new(b)
}
