//! Shared data model: benchmark samples, schema snapshots, SQL candidates,
//! execution responses and agent feedback, plus the schema prompt renderer.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// One benchmark item.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionSample {
    pub id: String,
    pub question: String,
    pub db_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub evidence: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gold_sql: Option<String>,
    /// Difficulty label carried through from the dataset (BIRD provides one).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub difficulty: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnDef {
    pub name: String,
    pub declared_type: String,
    pub is_primary_key: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableDef {
    pub name: String,
    pub columns: Vec<ColumnDef>,
}

impl TableDef {
    pub fn column(&self, name: &str) -> Option<&ColumnDef> {
        self.columns
            .iter()
            .find(|c| c.name.eq_ignore_ascii_case(name))
    }
}

/// A `table.column` reference.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ColumnRef {
    pub table: String,
    pub column: String,
}

impl ColumnRef {
    pub fn new(table: impl Into<String>, column: impl Into<String>) -> Self {
        Self {
            table: table.into(),
            column: column.into(),
        }
    }
}

impl std::fmt::Display for ColumnRef {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{}.{}", self.table, self.column)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ForeignKey {
    pub from: ColumnRef,
    pub to: ColumnRef,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchemaSnapshot {
    pub tables: Vec<TableDef>,
    pub foreign_keys: Vec<ForeignKey>,
}

impl SchemaSnapshot {
    pub fn table(&self, name: &str) -> Option<&TableDef> {
        self.tables
            .iter()
            .find(|t| t.name.eq_ignore_ascii_case(name))
    }

    pub fn has_column(&self, col: &ColumnRef) -> bool {
        self.table(&col.table)
            .is_some_and(|t| t.column(&col.column).is_some())
    }

    pub fn column_count(&self) -> usize {
        self.tables.iter().map(|t| t.columns.len()).sum()
    }

    /// Checks the structural invariants: unique names, non-empty tables and
    /// foreign keys whose endpoints exist.
    pub fn validate(&self) -> Result<(), ModelError> {
        let mut seen = std::collections::HashSet::new();
        for t in &self.tables {
            if !seen.insert(t.name.to_lowercase()) {
                return Err(ModelError::DuplicateName(t.name.clone()));
            }
            if t.columns.is_empty() {
                return Err(ModelError::EmptyTable(t.name.clone()));
            }
            let mut cols = std::collections::HashSet::new();
            for c in &t.columns {
                if !cols.insert(c.name.to_lowercase()) {
                    return Err(ModelError::DuplicateName(format!("{}.{}", t.name, c.name)));
                }
            }
        }
        for fk in &self.foreign_keys {
            for end in [&fk.from, &fk.to] {
                if !self.has_column(end) {
                    return Err(ModelError::DanglingColumn(end.to_string()));
                }
            }
        }
        Ok(())
    }
}

/// One matched literal with its BM25 score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoredValue {
    pub value: String,
    pub score: f64,
}

/// Example values selected per column for the schema prompt.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MatchedValues {
    pub columns: BTreeMap<ColumnRef, Vec<ScoredValue>>,
}

impl MatchedValues {
    pub fn get(&self, table: &str, column: &str) -> Option<&[ScoredValue]> {
        self.columns
            .iter()
            .find(|(k, _)| {
                k.table.eq_ignore_ascii_case(table) && k.column.eq_ignore_ascii_case(column)
            })
            .map(|(_, v)| v.as_slice())
    }

    /// Drops entries for columns absent from `snapshot`.
    pub fn restrict_to(&self, snapshot: &SchemaSnapshot) -> MatchedValues {
        MatchedValues {
            columns: self
                .columns
                .iter()
                .filter(|(k, _)| snapshot.has_column(k))
                .map(|(k, v)| (k.clone(), v.clone()))
                .collect(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Greedy,
    Sampled,
    Advanced,
    Fixed,
}

/// Temperature used to request greedy decoding.
pub const GREEDY_TEMPERATURE: f64 = 0.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SqlCandidate {
    pub plan: String,
    pub sql: String,
    pub origin: Origin,
    pub temperature: f64,
}

/// A normalized result cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "t", content = "v", rename_all = "snake_case")]
pub enum Scalar {
    Null,
    Integer(i64),
    Real(f64),
    Text(String),
    /// Hex SHA-256 of the blob bytes.
    Blob(String),
}

impl std::fmt::Display for Scalar {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Scalar::Null => f.write_str("None"),
            Scalar::Integer(i) => write!(f, "{i}"),
            Scalar::Real(r) => write!(f, "{r}"),
            Scalar::Text(s) => write!(f, "{s}"),
            Scalar::Blob(d) => write!(f, "<blob {}>", &d[..d.len().min(12)]),
        }
    }
}

pub type Row = Vec<Scalar>;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NormalizedTable {
    pub rows: Vec<Row>,
}

impl NormalizedTable {
    pub fn new(rows: Vec<Row>) -> Self {
        Self { rows }
    }

    /// Column count, or `None` for a table without rows.
    pub fn arity(&self) -> Option<usize> {
        self.rows.first().map(Vec::len)
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    /// True when the table is empty or every cell is null.
    pub fn is_empty_or_null(&self) -> bool {
        self.rows
            .iter()
            .all(|r| r.iter().all(|s| *s == Scalar::Null))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "status", rename_all = "snake_case")]
pub enum ExecOutcome {
    Ok { rows: NormalizedTable },
    SyntaxError { error_text: String },
    Timeout,
}

/// Result of running one statement. `duration` is wall-clock seconds and is
/// not serialized so that persisted results stay reproducible.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionResponse {
    #[serde(flatten)]
    pub outcome: ExecOutcome,
    #[serde(skip)]
    pub duration: f64,
}

impl ExecutionResponse {
    pub fn ok(rows: Vec<Row>, duration: f64) -> Self {
        Self {
            outcome: ExecOutcome::Ok {
                rows: NormalizedTable::new(rows),
            },
            duration,
        }
    }

    pub fn syntax_error(text: impl Into<String>, duration: f64) -> Self {
        Self {
            outcome: ExecOutcome::SyntaxError {
                error_text: text.into(),
            },
            duration,
        }
    }

    pub fn timeout(duration: f64) -> Self {
        Self {
            outcome: ExecOutcome::Timeout,
            duration,
        }
    }

    pub fn is_ok(&self) -> bool {
        matches!(self.outcome, ExecOutcome::Ok { .. })
    }

    pub fn rows(&self) -> Option<&NormalizedTable> {
        match &self.outcome {
            ExecOutcome::Ok { rows } => Some(rows),
            _ => None,
        }
    }

    pub fn error_text(&self) -> Option<&str> {
        match &self.outcome {
            ExecOutcome::SyntaxError { error_text } => Some(error_text),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FeedbackKind {
    Selection,
    Condition,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Correct,
    Incorrect,
    Unparseable,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feedback {
    pub kind: FeedbackKind,
    pub raw_text: String,
    pub verdict: Verdict,
    /// Set when the verdict came from the operation gate rather than a model.
    #[serde(default)]
    pub gated: bool,
}

impl Feedback {
    pub fn indicates_error(&self) -> bool {
        self.verdict == Verdict::Incorrect
    }
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum ModelError {
    #[error("matched values reference unknown column `{0}`")]
    DanglingColumn(String),
    #[error("duplicate name `{0}`")]
    DuplicateName(String),
    #[error("table `{0}` has no columns")]
    EmptyTable(String),
}

/// Header placed above the evidence block in every prompt.
pub const EVIDENCE_HEADER: &str = "External knowledge:";

fn is_plain_ident(name: &str) -> bool {
    let mut chars = name.chars();
    matches!(chars.next(), Some(c) if c.is_ascii_alphabetic() || c == '_')
        && chars.all(|c| c.is_ascii_alphanumeric() || c == '_')
}

/// Quotes an identifier with backticks unless it is a plain identifier.
pub fn quote_ident(name: &str) -> String {
    if is_plain_ident(name) {
        name.to_string()
    } else {
        format!("`{}`", name.replace('`', "``"))
    }
}

/// Renders the schema section shared by every agent prompt.
///
/// Layout: one `CREATE TABLE` block per table in snapshot order, each column
/// on its own line with matched example values as a trailing comment, then a
/// `Foreign keys:` block and, when given, the evidence under
/// [`EVIDENCE_HEADER`].
pub fn render_schema_prompt(
    snapshot: &SchemaSnapshot,
    matched: &MatchedValues,
    evidence: Option<&str>,
) -> Result<String, ModelError> {
    for col in matched.columns.keys() {
        if !snapshot.has_column(col) {
            return Err(ModelError::DanglingColumn(col.to_string()));
        }
    }

    let mut out = String::new();
    for table in &snapshot.tables {
        let _ = writeln!(out, "CREATE TABLE {} (", quote_ident(&table.name));
        let last = table.columns.len().saturating_sub(1);
        for (i, col) in table.columns.iter().enumerate() {
            let mut line = format!("  {}", quote_ident(&col.name));
            if !col.declared_type.is_empty() {
                line.push(' ');
                line.push_str(&col.declared_type);
            }
            if col.is_primary_key {
                line.push_str(" PRIMARY KEY");
            }
            if i != last {
                line.push(',');
            }
            if let Some(values) = matched.get(&table.name, &col.name) {
                if !values.is_empty() {
                    let list: Vec<&str> = values.iter().map(|v| v.value.as_str()).collect();
                    let _ = write!(line, " -- values: {}", list.join(" | "));
                }
            }
            out.push_str(&line);
            out.push('\n');
        }
        out.push_str(");\n");
    }
    if !snapshot.foreign_keys.is_empty() {
        out.push_str("Foreign keys:\n");
        for fk in &snapshot.foreign_keys {
            let _ = writeln!(
                out,
                "  {}.{} = {}.{}",
                quote_ident(&fk.from.table),
                quote_ident(&fk.from.column),
                quote_ident(&fk.to.table),
                quote_ident(&fk.to.column)
            );
        }
    }
    if let Some(ev) = evidence {
        if !out.is_empty() {
            out.push('\n');
        }
        let _ = writeln!(out, "{EVIDENCE_HEADER}\n{}", ev.trim());
    }
    Ok(out)
}

/// Reads a leading identifier (plain or backtick-quoted) from `s`.
fn read_ident(s: &str) -> Option<(String, &str)> {
    if let Some(rest) = s.strip_prefix('`') {
        let mut name = String::new();
        let mut chars = rest.char_indices().peekable();
        while let Some((i, c)) = chars.next() {
            if c == '`' {
                if matches!(chars.peek(), Some((_, '`'))) {
                    chars.next();
                    name.push('`');
                } else {
                    return Some((name, &rest[i + 1..]));
                }
            } else {
                name.push(c);
            }
        }
        None
    } else {
        let end = s
            .find(|c: char| !(c.is_ascii_alphanumeric() || c == '_'))
            .unwrap_or(s.len());
        (end > 0).then(|| (s[..end].to_string(), &s[end..]))
    }
}

/// Parses table and column names back out of a rendered schema prompt.
pub fn parse_schema_names(prompt: &str) -> Vec<(String, Vec<String>)> {
    let mut tables: Vec<(String, Vec<String>)> = Vec::new();
    let mut in_table = false;
    for line in prompt.lines() {
        if let Some(rest) = line.strip_prefix("CREATE TABLE ") {
            if let Some((name, _)) = read_ident(rest) {
                tables.push((name, Vec::new()));
                in_table = true;
            }
        } else if line == ");" {
            in_table = false;
        } else if in_table {
            if let Some((name, _)) = line.strip_prefix("  ").and_then(read_ident) {
                if let Some(t) = tables.last_mut() {
                    t.1.push(name);
                }
            }
        }
    }
    tables
}
