//! Lexical SQL trait recognition.
//!
//! A small tokenizer plus a parenthesis depth counter. String literals,
//! quoted identifiers and comments are skipped, so keywords that only occur
//! inside them are never reported.

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SqlTraits {
    pub has_join: bool,
    pub has_subquery: bool,
    pub has_order_by_outer: bool,
    pub has_group_by: bool,
    pub has_limit: bool,
    pub uses_min: bool,
    pub uses_max: bool,
    pub uses_count: bool,
    pub uses_avg: bool,
    pub uses_sum: bool,
    pub uses_divide: bool,
    pub uses_case_when: bool,
    /// Number of AND/OR connectors, excluding the AND of `BETWEEN .. AND`.
    pub logical_connectors: u32,
}

impl SqlTraits {
    /// True when any operation from the selection-validator gate list is used:
    /// min, max, count, avg, sum, divide or case when.
    pub fn has_gated_operation(&self) -> bool {
        self.uses_min
            || self.uses_max
            || self.uses_count
            || self.uses_avg
            || self.uses_sum
            || self.uses_divide
            || self.uses_case_when
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) enum Token {
    Word(String),
    Number,
    Literal,
    QuotedIdent,
    Punct(char),
}

/// Tokenizes SQL text, upper-casing words. Unterminated literals or comments
/// end the token stream.
pub(crate) fn lex(sql: &str) -> Vec<Token> {
    let bytes: Vec<char> = sql.chars().collect();
    let mut out = Vec::new();
    let mut i = 0;
    let n = bytes.len();
    while i < n {
        let c = bytes[i];
        if c.is_whitespace() {
            i += 1;
        } else if c == '-' && bytes.get(i + 1) == Some(&'-') {
            while i < n && bytes[i] != '\n' {
                i += 1;
            }
        } else if c == '/' && bytes.get(i + 1) == Some(&'*') {
            i += 2;
            while i < n && !(bytes[i] == '*' && bytes.get(i + 1) == Some(&'/')) {
                i += 1;
            }
            if i >= n {
                break;
            }
            i += 2;
        } else if c == '\'' || c == '"' || c == '`' || c == '[' {
            let close = if c == '[' { ']' } else { c };
            i += 1;
            let mut terminated = false;
            while i < n {
                if bytes[i] == close {
                    if close != ']' && bytes.get(i + 1) == Some(&close) {
                        i += 2;
                        continue;
                    }
                    terminated = true;
                    i += 1;
                    break;
                }
                i += 1;
            }
            if !terminated {
                break;
            }
            out.push(if c == '\'' {
                Token::Literal
            } else {
                Token::QuotedIdent
            });
        } else if c.is_ascii_digit()
            || (c == '.' && bytes.get(i + 1).is_some_and(|d| d.is_ascii_digit()))
        {
            while i < n && (bytes[i].is_ascii_alphanumeric() || bytes[i] == '.') {
                i += 1;
            }
            out.push(Token::Number);
        } else if c.is_alphanumeric() || c == '_' || c == '$' {
            let start = i;
            while i < n && (bytes[i].is_alphanumeric() || bytes[i] == '_' || bytes[i] == '$') {
                i += 1;
            }
            let word: String = bytes[start..i].iter().collect();
            out.push(Token::Word(word.to_ascii_uppercase()));
        } else {
            out.push(Token::Punct(c));
            i += 1;
        }
    }
    out
}

fn is_word(tok: Option<&Token>, w: &str) -> bool {
    matches!(tok, Some(Token::Word(x)) if x == w)
}

pub fn classify_sql(sql: &str) -> SqlTraits {
    let toks = lex(sql);
    let mut t = SqlTraits::default();
    let mut depth: i32 = 0;
    let mut pending_between = 0u32;
    for (i, tok) in toks.iter().enumerate() {
        let next = toks.get(i + 1);
        match tok {
            Token::Punct('(') => depth += 1,
            Token::Punct(')') => depth = (depth - 1).max(0),
            Token::Punct('/') => t.uses_divide = true,
            Token::Word(w) => {
                let is_call = matches!(next, Some(Token::Punct('(')));
                match w.as_str() {
                    "MIN" if is_call => t.uses_min = true,
                    "MAX" if is_call => t.uses_max = true,
                    "COUNT" if is_call => t.uses_count = true,
                    "AVG" if is_call => t.uses_avg = true,
                    "SUM" if is_call => t.uses_sum = true,
                    "CASE" => t.uses_case_when = true,
                    "JOIN" => t.has_join = true,
                    "SELECT" if depth > 0 => t.has_subquery = true,
                    "ORDER" if depth == 0 && is_word(next, "BY") => t.has_order_by_outer = true,
                    "GROUP" if is_word(next, "BY") => t.has_group_by = true,
                    "LIMIT" => t.has_limit = true,
                    "BETWEEN" => pending_between += 1,
                    "AND" if pending_between > 0 => pending_between -= 1,
                    "AND" | "OR" => t.logical_connectors += 1,
                    _ => {}
                }
            }
            _ => {}
        }
    }
    t
}
