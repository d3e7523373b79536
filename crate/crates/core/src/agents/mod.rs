//! Prompt construction and completion parsing for the planner, validator,
//! fix and selection agents.

mod extract;
mod selection;
pub mod templates;

use std::path::PathBuf;

use thiserror::Error;

use crate::backend::{Backend, BackendError, GenerationRequest};
use crate::executor::classify_sql;
use crate::model::{
    ExecutionResponse, Feedback, FeedbackKind, Origin, QuestionSample, SqlCandidate, Verdict,
};

pub use extract::{extract_sql, normalize_sql, parse_choice, parse_verdict, Choice};
pub use selection::{select_best, selection_prompt, Selection, DEFAULT_SUBSET_SIZE};
pub use templates::{render_response, TEMPLATE_VERSION};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AgentError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("planner produced no extractable SQL")]
    EmptyPlan,
    #[error("fix called without error-indicating feedback")]
    NoErrorFeedback,
    #[error("fix agent produced no extractable SQL")]
    FixFailed,
    #[error("selection needs aligned, non-empty candidates and responses")]
    BadSelectionInput,
}

/// Everything an agent sees about one sample.
#[derive(Debug, Clone)]
pub struct AgentContext {
    pub sample: QuestionSample,
    /// Schema section rendered from the pruned snapshot.
    pub schema_prompt: String,
    pub db_path: PathBuf,
}

fn base_vars(ctx: &AgentContext) -> Vec<(&'static str, &str)> {
    vec![
        ("schema", ctx.schema_prompt.as_str()),
        ("question", ctx.sample.question.as_str()),
    ]
}

pub fn planner_prompt(ctx: &AgentContext) -> String {
    templates::fill(templates::PLANNER, &base_vars(ctx))
}

/// Generates up to `k` candidates: one greedy request, then one sampled
/// request for the remaining `k - 1` at `temperature`. Completions without
/// extractable SQL are dropped.
pub fn plan_candidates(
    backend: &dyn Backend,
    ctx: &AgentContext,
    k: usize,
    temperature: f64,
) -> Result<Vec<SqlCandidate>, AgentError> {
    let k = k.max(1);
    let prompt = planner_prompt(ctx);
    let mut out = Vec::with_capacity(k);

    let greedy = backend.complete(&GenerationRequest::greedy(prompt.clone()))?;
    out.extend(greedy.completions.iter().filter_map(|c| {
        extract_sql(c).map(|(plan, sql)| SqlCandidate {
            plan,
            sql,
            origin: Origin::Greedy,
            temperature: 0.0,
        })
    }));

    if k > 1 {
        let req = GenerationRequest::new(prompt, k - 1, temperature)?;
        let sampled = backend.complete(&req)?;
        out.extend(sampled.completions.iter().filter_map(|c| {
            extract_sql(c).map(|(plan, sql)| SqlCandidate {
                plan,
                sql,
                origin: Origin::Sampled,
                temperature,
            })
        }));
    }

    if out.is_empty() {
        return Err(AgentError::EmptyPlan);
    }
    Ok(out)
}

pub fn validator_prompt(
    kind: FeedbackKind,
    ctx: &AgentContext,
    sql: &str,
    response: &ExecutionResponse,
) -> String {
    let template = match kind {
        FeedbackKind::Selection => templates::VALIDATOR_SELECTION,
        FeedbackKind::Condition => templates::VALIDATOR_CONDITION,
    };
    let rendered = render_response(response);
    let mut vars = base_vars(ctx);
    vars.push(("sql", sql));
    vars.push(("response", &rendered));
    templates::fill(template, &vars)
}

/// True when the selection validator skips `sql` because it uses one of the
/// gated operations.
pub fn selection_gated(sql: &str) -> bool {
    classify_sql(sql).has_gated_operation()
}

/// Runs one validator on an executed candidate.
///
/// The selection validator is skipped (verdict `correct`, no backend call)
/// for queries using min, max, count, avg, sum, divide or case when.
pub fn validate(
    backend: &dyn Backend,
    kind: FeedbackKind,
    ctx: &AgentContext,
    candidate: &SqlCandidate,
    response: &ExecutionResponse,
) -> Result<Feedback, AgentError> {
    if kind == FeedbackKind::Selection && selection_gated(&candidate.sql) {
        return Ok(Feedback {
            kind,
            raw_text: String::new(),
            verdict: Verdict::Correct,
            gated: true,
        });
    }
    let prompt = validator_prompt(kind, ctx, &candidate.sql, response);
    let raw_text = backend
        .complete(&GenerationRequest::greedy(prompt))?
        .completions
        .into_iter()
        .next()
        .unwrap_or_default();
    let verdict = parse_verdict(&raw_text);
    if verdict == Verdict::Unparseable {
        log::warn!(
            "{kind:?} validator verdict unparseable for sample {}; treating as correct",
            ctx.sample.id
        );
    }
    Ok(Feedback {
        kind,
        raw_text,
        verdict,
        gated: false,
    })
}

pub fn fix_prompt(
    ctx: &AgentContext,
    sql: &str,
    response: &ExecutionResponse,
    feedback_texts: &[&str],
) -> String {
    let rendered = render_response(response);
    let feedback = feedback_texts
        .iter()
        .map(|t| t.trim())
        .collect::<Vec<_>>()
        .join("\n\n");
    let mut vars = base_vars(ctx);
    vars.push(("sql", sql));
    vars.push(("response", &rendered));
    vars.push(("feedback", &feedback));
    templates::fill(templates::FIX, &vars)
}

/// Asks the fix agent for a corrected query using only the feedback that
/// flags an error.
pub fn fix(
    backend: &dyn Backend,
    ctx: &AgentContext,
    candidate: &SqlCandidate,
    response: &ExecutionResponse,
    feedbacks: &[Feedback],
) -> Result<SqlCandidate, AgentError> {
    let texts: Vec<&str> = feedbacks
        .iter()
        .filter(|f| f.indicates_error())
        .map(|f| f.raw_text.as_str())
        .collect();
    fix_with_texts(backend, ctx, &candidate.sql, response, &texts)
}

/// [`fix`] over raw error-indicating feedback texts.
pub fn fix_with_texts(
    backend: &dyn Backend,
    ctx: &AgentContext,
    sql: &str,
    response: &ExecutionResponse,
    texts: &[&str],
) -> Result<SqlCandidate, AgentError> {
    if texts.is_empty() {
        return Err(AgentError::NoErrorFeedback);
    }
    let prompt = fix_prompt(ctx, sql, response, texts);
    let completion = backend
        .complete(&GenerationRequest::greedy(prompt))?
        .completions
        .into_iter()
        .next()
        .unwrap_or_default();
    let (plan, sql) = extract_sql(&completion).ok_or(AgentError::FixFailed)?;
    Ok(SqlCandidate {
        plan,
        sql,
        origin: Origin::Fixed,
        temperature: 0.0,
    })
}

pub fn feedback_editor_prompt(
    ctx: &AgentContext,
    sql: &str,
    response: &ExecutionResponse,
    feedback: &str,
) -> String {
    let rendered = render_response(response);
    let mut vars = base_vars(ctx);
    vars.push(("sql", sql));
    vars.push(("response", &rendered));
    vars.push(("feedback", feedback));
    templates::fill(templates::FEEDBACK_EDITOR, &vars)
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::backend::{CountingBackend, Fixture, ScriptedBackend};
    use crate::model::Scalar;
    use std::sync::Arc;

    pub(crate) fn ctx() -> AgentContext {
        AgentContext {
            sample: QuestionSample {
                id: "s1".into(),
                question: "How many singers?".into(),
                db_id: "music".into(),
                evidence: None,
                gold_sql: None,
                difficulty: None,
            },
            schema_prompt: "CREATE TABLE singer (\n  id INTEGER\n);\n".into(),
            db_path: PathBuf::from("/tmp/none.sqlite"),
        }
    }

    fn cand(sql: &str) -> SqlCandidate {
        SqlCandidate {
            plan: String::new(),
            sql: sql.into(),
            origin: Origin::Greedy,
            temperature: 0.0,
        }
    }

    #[test]
    fn plan_k_one_issues_only_greedy() {
        let c = ctx();
        let mut f = Fixture::default();
        f.push_one(&planner_prompt(&c), 1, 0.0, "plan\n```sql\nSELECT 1\n```");
        let b = CountingBackend::new(Arc::new(ScriptedBackend::new(f)));
        let out = plan_candidates(b.as_ref(), &c, 1, 1.0).unwrap();
        assert_eq!(b.calls(), 1);
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].origin, Origin::Greedy);
        assert_eq!(out[0].sql, "SELECT 1");
        assert_eq!(out[0].plan, "plan");
    }

    #[test]
    fn plan_drops_unextractable_completions() {
        let c = ctx();
        let p = planner_prompt(&c);
        let mut f = Fixture::default();
        f.push_one(&p, 1, 0.0, "```sql\nSELECT 1\n```");
        f.push(
            &p,
            3,
            1.0,
            vec![
                "```sql\nSELECT 2\n```".into(),
                "no idea".into(),
                "SELECT 3".into(),
            ],
        );
        let out = plan_candidates(&ScriptedBackend::new(f), &c, 4, 1.0).unwrap();
        let sqls: Vec<&str> = out.iter().map(|c| c.sql.as_str()).collect();
        assert_eq!(sqls, ["SELECT 1", "SELECT 2", "SELECT 3"]);
        assert_eq!(out[1].origin, Origin::Sampled);
        assert_eq!(out[1].temperature, 1.0);
    }

    #[test]
    fn plan_with_nothing_extractable_fails() {
        let c = ctx();
        let mut f = Fixture::default();
        f.push_one(&planner_prompt(&c), 1, 0.0, "hmm");
        assert_eq!(
            plan_candidates(&ScriptedBackend::new(f), &c, 1, 1.0),
            Err(AgentError::EmptyPlan)
        );
    }

    #[test]
    fn selection_gate_skips_backend() {
        let c = ctx();
        let b = CountingBackend::new(Arc::new(ScriptedBackend::new(Fixture::default())));
        let resp = ExecutionResponse::ok(vec![vec![Scalar::Integer(3)]], 0.0);
        let fb = validate(
            b.as_ref(),
            FeedbackKind::Selection,
            &c,
            &cand("SELECT count(*) FROM singer"),
            &resp,
        )
        .unwrap();
        assert_eq!(fb.verdict, Verdict::Correct);
        assert!(fb.gated);
        assert_eq!(b.calls(), 0);
    }

    #[test]
    fn validator_verdict_from_completion() {
        let c = ctx();
        let sql = "SELECT id FROM singer";
        let resp = ExecutionResponse::ok(vec![], 0.0);
        let mut f = Fixture::default();
        f.push_one(
            &validator_prompt(FeedbackKind::Condition, &c, sql, &resp),
            1,
            0.0,
            "Empty result. Add `id IS NOT NULL`.\nThe SQL is incorrect",
        );
        let fb = validate(
            &ScriptedBackend::new(f),
            FeedbackKind::Condition,
            &c,
            &cand(sql),
            &resp,
        )
        .unwrap();
        assert_eq!(fb.verdict, Verdict::Incorrect);
        assert!(fb.raw_text.contains("IS NOT NULL"));
        assert!(validator_prompt(FeedbackKind::Condition, &c, sql, &resp).contains("empty set"));
    }

    #[test]
    fn unparseable_verdict_is_kept() {
        let c = ctx();
        let sql = "SELECT id FROM singer";
        let resp = ExecutionResponse::ok(vec![], 0.0);
        let mut f = Fixture::default();
        f.push_one(
            &validator_prompt(FeedbackKind::Selection, &c, sql, &resp),
            1,
            0.0,
            "maybe",
        );
        let fb = validate(
            &ScriptedBackend::new(f),
            FeedbackKind::Selection,
            &c,
            &cand(sql),
            &resp,
        )
        .unwrap();
        assert_eq!(fb.verdict, Verdict::Unparseable);
        assert!(!fb.indicates_error());
    }

    #[test]
    fn fix_only_sees_error_feedback() {
        let c = ctx();
        let resp = ExecutionResponse::syntax_error("no such column: nme", 0.0);
        let bad = Feedback {
            kind: FeedbackKind::Condition,
            raw_text: "wrong column nme. The SQL is incorrect".into(),
            verdict: Verdict::Incorrect,
            gated: false,
        };
        let good = Feedback {
            kind: FeedbackKind::Selection,
            raw_text: "GOOD-FEEDBACK The SQL is correct".into(),
            verdict: Verdict::Correct,
            gated: false,
        };
        let prompt = fix_prompt(
            &c,
            "SELECT nme FROM singer",
            &resp,
            &[bad.raw_text.as_str()],
        );
        assert!(!prompt.contains("GOOD-FEEDBACK"));
        assert!(prompt.contains("no such column"));
        let mut f = Fixture::default();
        f.push_one(&prompt, 1, 0.0, "```sql\nSELECT name FROM singer\n```");
        let fixed = fix(
            &ScriptedBackend::new(f),
            &c,
            &cand("SELECT nme FROM singer"),
            &resp,
            &[good.clone(), bad],
        )
        .unwrap();
        assert_eq!(fixed.origin, Origin::Fixed);
        assert_eq!(fixed.sql, "SELECT name FROM singer");

        let none = fix(
            &ScriptedBackend::new(Fixture::default()),
            &c,
            &cand("SELECT 1"),
            &resp,
            &[good],
        );
        assert_eq!(none, Err(AgentError::NoErrorFeedback));
    }
}
