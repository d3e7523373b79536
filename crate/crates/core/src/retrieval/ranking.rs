use std::collections::{BTreeMap, HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::model::{ColumnRef, MatchedValues, SchemaSnapshot, TableDef};

use super::tokenize::tokenize;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankerBudget {
    pub max_tables: usize,
    pub max_columns_per_table: usize,
}

impl Default for RankerBudget {
    fn default() -> Self {
        Self {
            max_tables: 6,
            max_columns_per_table: 10,
        }
    }
}

/// Relevance scores keyed by table name and by column reference.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SchemaScores {
    pub tables: BTreeMap<String, f64>,
    pub columns: BTreeMap<ColumnRef, f64>,
}

impl SchemaScores {
    pub fn table(&self, name: &str) -> f64 {
        self.tables.get(name).copied().unwrap_or(0.0)
    }

    pub fn column(&self, table: &str, column: &str) -> f64 {
        self.columns
            .get(&ColumnRef::new(table, column))
            .copied()
            .unwrap_or(0.0)
    }
}

/// Scores schema elements for relevance to a question.
pub trait SchemaRanker: Send + Sync {
    fn rank(
        &self,
        question: &str,
        snapshot: &SchemaSnapshot,
        matched: &MatchedValues,
    ) -> SchemaScores;
}

/// Set-cosine overlap `|Q ∩ E| / sqrt(|Q| · |E|)`.
fn overlap(question: &HashSet<String>, element: &HashSet<String>) -> f64 {
    if question.is_empty() || element.is_empty() {
        return 0.0;
    }
    let hits = element.intersection(question).count() as f64;
    hits / ((question.len() * element.len()) as f64).sqrt()
}

/// Token-overlap baseline. A column's element tokens are its name tokens
/// plus the tokens of its matched values; a table scores the larger of its
/// own name overlap and its best column.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalRanker;

impl SchemaRanker for LexicalRanker {
    fn rank(
        &self,
        question: &str,
        snapshot: &SchemaSnapshot,
        matched: &MatchedValues,
    ) -> SchemaScores {
        let q: HashSet<String> = tokenize(question).into_iter().collect();
        let mut scores = SchemaScores::default();
        for table in &snapshot.tables {
            let name_tokens: HashSet<String> = tokenize(&table.name).into_iter().collect();
            let mut best = overlap(&q, &name_tokens);
            for col in &table.columns {
                let mut tokens: HashSet<String> = tokenize(&col.name).into_iter().collect();
                if let Some(values) = matched.get(&table.name, &col.name) {
                    tokens.extend(values.iter().flat_map(|v| tokenize(&v.value)));
                }
                let s = overlap(&q, &tokens);
                best = best.max(s);
                scores
                    .columns
                    .insert(ColumnRef::new(table.name.clone(), col.name.clone()), s);
            }
            scores.tables.insert(table.name.clone(), best);
        }
        scores
    }
}

/// Scores produced by an external process (for example a learned encoder),
/// keyed `"table"` and `"table.column"`. Missing keys score 0.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct PrecomputedRanker {
    pub scores: HashMap<String, f64>,
}

impl PrecomputedRanker {
    pub fn from_file(path: &Path) -> std::io::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        serde_json::from_str(&text)
            .map_err(|e| std::io::Error::new(std::io::ErrorKind::InvalidData, e))
    }
}

impl SchemaRanker for PrecomputedRanker {
    fn rank(
        &self,
        _question: &str,
        snapshot: &SchemaSnapshot,
        _matched: &MatchedValues,
    ) -> SchemaScores {
        let mut out = SchemaScores::default();
        for table in &snapshot.tables {
            out.tables.insert(
                table.name.clone(),
                self.scores.get(&table.name).copied().unwrap_or(0.0),
            );
            for col in &table.columns {
                let key = format!("{}.{}", table.name, col.name);
                out.columns.insert(
                    ColumnRef::new(table.name.clone(), col.name.clone()),
                    self.scores.get(&key).copied().unwrap_or(0.0),
                );
            }
        }
        out
    }
}

/// Lexical scores for `question`.
pub fn rank_elements(
    question: &str,
    snapshot: &SchemaSnapshot,
    matched: &MatchedValues,
) -> SchemaScores {
    LexicalRanker.rank(question, snapshot, matched)
}

/// Indices of the `n` highest scores, ties to the lower index, returned in
/// ascending index order.
fn top_indices(scores: &[f64], n: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    idx.truncate(n);
    idx.sort_unstable();
    idx
}

/// Keeps the best `max_tables` tables and, within each, the best
/// `max_columns_per_table` columns plus every primary-key and foreign-key
/// column. Original order is preserved and foreign keys that lost an
/// endpoint are dropped.
pub fn filter_schema(
    snapshot: &SchemaSnapshot,
    scores: &SchemaScores,
    budget: RankerBudget,
) -> SchemaSnapshot {
    let table_scores: Vec<f64> = snapshot
        .tables
        .iter()
        .map(|t| scores.table(&t.name))
        .collect();
    let kept_tables = top_indices(&table_scores, budget.max_tables.max(1));

    let fk_cols: HashSet<(String, String)> = snapshot
        .foreign_keys
        .iter()
        .flat_map(|fk| [&fk.from, &fk.to])
        .map(|c| (c.table.to_lowercase(), c.column.to_lowercase()))
        .collect();

    let tables: Vec<TableDef> = kept_tables
        .into_iter()
        .map(|ti| {
            let table = &snapshot.tables[ti];
            let col_scores: Vec<f64> = table
                .columns
                .iter()
                .map(|c| scores.column(&table.name, &c.name))
                .collect();
            let mut keep: HashSet<usize> =
                top_indices(&col_scores, budget.max_columns_per_table.max(1))
                    .into_iter()
                    .collect();
            for (ci, c) in table.columns.iter().enumerate() {
                if c.is_primary_key
                    || fk_cols.contains(&(table.name.to_lowercase(), c.name.to_lowercase()))
                {
                    keep.insert(ci);
                }
            }
            TableDef {
                name: table.name.clone(),
                columns: table
                    .columns
                    .iter()
                    .enumerate()
                    .filter(|(ci, _)| keep.contains(ci))
                    .map(|(_, c)| c.clone())
                    .collect(),
            }
        })
        .collect();

    let mut out = SchemaSnapshot {
        tables,
        foreign_keys: Vec::new(),
    };
    out.foreign_keys = snapshot
        .foreign_keys
        .iter()
        .filter(|fk| out.has_column(&fk.from) && out.has_column(&fk.to))
        .cloned()
        .collect();
    out
}
