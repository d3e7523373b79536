//! Parsing of agent completions: SQL extraction, validator verdicts and
//! selection choices.

use std::sync::LazyLock;

use regex::Regex;

use crate::model::Verdict;

static SQL_FENCE: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?is)```sql[ \t]*\r?\n?(.*?)```").unwrap());
static VERDICT: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)the sql is (correct|incorrect)").unwrap());
static CHOICE_NUMBER: LazyLock<Regex> =
    LazyLock::new(|| Regex::new(r"(?i)\b(\d+)(?:st|nd|rd|th)?\b").unwrap());
static NONE_WORD: LazyLock<Regex> = LazyLock::new(|| Regex::new(r"(?i)\bnone\b").unwrap());

fn clean_sql(s: &str) -> String {
    s.trim()
        .trim_end_matches(|c: char| c == ';' || c.is_whitespace())
        .trim()
        .to_string()
}

fn starts_with_query_keyword(s: &str) -> bool {
    let word: String = s
        .chars()
        .take_while(|c| c.is_alphanumeric() || *c == '_')
        .collect();
    word.eq_ignore_ascii_case("SELECT") || word.eq_ignore_ascii_case("WITH")
}

/// Splits a completion into `(plan, sql)`.
///
/// Prefers the last ```` ```sql ```` fenced block; otherwise takes the last
/// block of text (blocks are separated by blank lines or fences) that starts
/// with SELECT or WITH, up to its first `;`. The plan is the text before the
/// chosen SQL.
pub fn extract_sql(completion: &str) -> Option<(String, String)> {
    if let Some(m) = SQL_FENCE
        .captures_iter(completion)
        .filter(|c| !clean_sql(&c[1]).is_empty())
        .last()
    {
        let whole = m.get(0).expect("match");
        return Some((
            completion[..whole.start()].trim().to_string(),
            clean_sql(&m[1]),
        ));
    }

    let mut best: Option<(usize, String)> = None;
    let mut block_start = 0;
    let mut offset = 0;
    let flush = |start: usize, end: usize, best: &mut Option<(usize, String)>| {
        let block = &completion[start..end];
        let trimmed = block.trim_start();
        if starts_with_query_keyword(trimmed) {
            let stmt = trimmed.split(';').next().unwrap_or(trimmed);
            let sql = clean_sql(stmt);
            if !sql.is_empty() {
                *best = Some((start + (block.len() - trimmed.len()), sql));
            }
        }
    };
    for line in completion.split_inclusive('\n') {
        let t = line.trim();
        if t.is_empty() || t.starts_with("```") {
            flush(block_start, offset, &mut best);
            block_start = offset + line.len();
        }
        offset += line.len();
    }
    flush(block_start, completion.len(), &mut best);
    best.map(|(pos, sql)| {
        (
            completion[..pos]
                .trim()
                .trim_end_matches("```")
                .trim()
                .to_string(),
            sql,
        )
    })
}

/// Verdict from the last "the sql is correct/incorrect" phrase.
pub fn parse_verdict(completion: &str) -> Verdict {
    match VERDICT.captures_iter(completion).last() {
        Some(c) if c[1].eq_ignore_ascii_case("correct") => Verdict::Correct,
        Some(_) => Verdict::Incorrect,
        None => Verdict::Unparseable,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Choice {
    /// Zero-based index into the presented candidates.
    Index(usize),
    None,
    Unparseable,
}

/// Reads the selection answer from the last non-empty line: the last number
/// on it (1-based, ordinal suffixes allowed), else the word "none".
pub fn parse_choice(completion: &str, count: usize) -> Choice {
    let Some(line) = completion.lines().rev().find(|l| !l.trim().is_empty()) else {
        return Choice::Unparseable;
    };
    if let Some(c) = CHOICE_NUMBER.captures_iter(line).last() {
        return match c[1].parse::<usize>() {
            Ok(n) if (1..=count).contains(&n) => Choice::Index(n - 1),
            _ => Choice::Unparseable,
        };
    }
    if NONE_WORD.is_match(line) {
        Choice::None
    } else {
        Choice::Unparseable
    }
}

/// Canonical form used for candidate deduplication: whitespace collapsed,
/// text outside quotes lowercased, trailing semicolons dropped.
pub fn normalize_sql(sql: &str) -> String {
    let mut out = String::with_capacity(sql.len());
    let mut quote: Option<char> = None;
    let mut pending_space = false;
    for c in sql.trim().trim_end_matches(';').trim_end().chars() {
        match quote {
            Some(q) => {
                out.push(c);
                if c == q {
                    quote = None;
                }
            }
            None if c.is_whitespace() => pending_space = true,
            None => {
                if pending_space && !out.is_empty() {
                    out.push(' ');
                }
                pending_space = false;
                if matches!(c, '\'' | '"' | '`') {
                    quote = Some(c);
                }
                out.push(c.to_ascii_lowercase());
            }
        }
    }
    out
}
