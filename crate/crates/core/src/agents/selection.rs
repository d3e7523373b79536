use std::fmt::Write as _;

use super::{parse_choice, templates, AgentContext, AgentError, Choice};
use crate::backend::{Backend, GenerationRequest};
use crate::model::{ExecutionResponse, SqlCandidate};

pub const DEFAULT_SUBSET_SIZE: usize = 5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Selection {
    /// Index into the original candidate list, or `None` when every
    /// candidate was rejected.
    pub index: Option<usize>,
    pub calls: usize,
}

pub fn selection_prompt(
    ctx: &AgentContext,
    shown: &[(&SqlCandidate, &ExecutionResponse)],
) -> String {
    let mut block = String::new();
    for (i, (cand, resp)) in shown.iter().enumerate() {
        let _ = write!(
            block,
            "Candidate {}:\n```sql\n{}\n```\n{}\n\n",
            i + 1,
            cand.sql,
            templates::render_response(resp)
        );
    }
    templates::fill(
        templates::SELECTION,
        &[
            ("schema", ctx.schema_prompt.as_str()),
            ("question", ctx.sample.question.as_str()),
            ("candidates", block.trim_end()),
        ],
    )
}

/// Tournament selection over chunks of at most `k` candidates.
///
/// Each round splits the surviving list into consecutive chunks; a chunk of
/// one advances without a call. A chunk answered with "none" drops out, and
/// a round where every chunk drops out yields `None`. An unparseable answer
/// falls back to the chunk's first executable candidate (or its first
/// candidate when none executed).
pub fn select_best(
    backend: &dyn Backend,
    ctx: &AgentContext,
    candidates: &[SqlCandidate],
    responses: &[ExecutionResponse],
    k: usize,
) -> Result<Selection, AgentError> {
    if candidates.is_empty() || candidates.len() != responses.len() {
        return Err(AgentError::BadSelectionInput);
    }
    let k = k.max(2);
    let mut alive: Vec<usize> = (0..candidates.len()).collect();
    let mut calls = 0;
    while alive.len() > 1 {
        let mut next = Vec::new();
        for chunk in alive.chunks(k) {
            if chunk.len() == 1 {
                next.push(chunk[0]);
                continue;
            }
            let shown: Vec<_> = chunk
                .iter()
                .map(|&i| (&candidates[i], &responses[i]))
                .collect();
            let prompt = selection_prompt(ctx, &shown);
            let answer = backend
                .complete(&GenerationRequest::greedy(prompt))?
                .completions
                .into_iter()
                .next()
                .unwrap_or_default();
            calls += 1;
            match parse_choice(&answer, chunk.len()) {
                Choice::Index(j) => next.push(chunk[j]),
                Choice::None => {}
                Choice::Unparseable => {
                    let fallback = chunk
                        .iter()
                        .copied()
                        .find(|&i| responses[i].is_ok())
                        .unwrap_or(chunk[0]);
                    log::warn!(
                        "selection answer unparseable for sample {}; falling back to candidate {fallback}",
                        ctx.sample.id
                    );
                    next.push(fallback);
                }
            }
        }
        if next.is_empty() {
            return Ok(Selection { index: None, calls });
        }
        alive = next;
    }
    Ok(Selection {
        index: alive.first().copied(),
        calls,
    })
}
