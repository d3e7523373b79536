//! Okapi BM25 over per-column value catalogs.
//!
//! Each candidate value is one document and a column's value list is its
//! corpus. For distinct query terms `t`:
//!
//! ```text
//! score = Σ idf(t) · tf·(k1+1) / (tf + k1·(1 − b + b·len/avg_len))
//! idf(t) = ln(1 + (N − df + 0.5) / (df + 0.5))
//! ```

use std::collections::{BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::dataset::{ColumnCatalog, ValueCatalog};
use crate::model::{MatchedValues, ScoredValue};

use super::tokenize::tokenize;

pub const DEFAULT_K1: f64 = 1.2;
pub const DEFAULT_B: f64 = 0.75;
/// Values kept per column.
pub const DEFAULT_TOP_K: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub doc_count: usize,
    pub avg_doc_len: f64,
    pub doc_freq: HashMap<String, usize>,
}

impl CorpusStats {
    pub fn from_documents<D: AsRef<[String]>>(docs: &[D]) -> Self {
        let mut doc_freq: HashMap<String, usize> = HashMap::new();
        let mut total = 0usize;
        for doc in docs {
            let doc = doc.as_ref();
            total += doc.len();
            let uniq: HashSet<&String> = doc.iter().collect();
            for term in uniq {
                *doc_freq.entry(term.clone()).or_default() += 1;
            }
        }
        let doc_count = docs.len().max(1);
        let avg = total as f64 / doc_count as f64;
        Self {
            doc_count,
            // all-empty corpora would otherwise divide by zero
            avg_doc_len: if avg > 0.0 { avg } else { 1.0 },
            doc_freq,
        }
    }

    pub fn idf(&self, term: &str) -> f64 {
        let n = self.doc_count as f64;
        let df = self.doc_freq.get(term).copied().unwrap_or(0) as f64;
        (1.0 + (n - df + 0.5) / (df + 0.5)).ln()
    }
}

pub fn bm25_score(
    query_terms: &[String],
    doc_terms: &[String],
    stats: &CorpusStats,
    k1: f64,
    b: f64,
) -> f64 {
    if query_terms.is_empty() || doc_terms.is_empty() {
        return 0.0;
    }
    let len_norm = 1.0 - b + b * doc_terms.len() as f64 / stats.avg_doc_len;
    let query: BTreeSet<&String> = query_terms.iter().collect();
    query
        .into_iter()
        .map(|term| {
            let tf = doc_terms.iter().filter(|t| *t == term).count() as f64;
            if tf == 0.0 {
                0.0
            } else {
                stats.idf(term) * tf * (k1 + 1.0) / (tf + k1 * len_norm)
            }
        })
        .sum()
}

/// Scores every value of one column against the question tokens.
pub fn score_column(query_terms: &[String], column: &ColumnCatalog, k1: f64, b: f64) -> Vec<f64> {
    let docs: Vec<Vec<String>> = column.values.iter().map(|v| tokenize(&v.text)).collect();
    let stats = CorpusStats::from_documents(&docs);
    docs.iter()
        .map(|d| bm25_score(query_terms, d, &stats, k1, b))
        .collect()
}

/// Top-`k` positive-scoring values per column, ties broken by catalog order.
/// A column with no positive score keeps its first catalog value at score 0;
/// an empty column gets an empty list.
pub fn match_values(question: &str, catalog: &ValueCatalog, k: usize) -> MatchedValues {
    let k = k.max(1);
    let query = tokenize(question);
    let mut out = MatchedValues::default();
    for column in &catalog.columns {
        let scores = score_column(&query, column, DEFAULT_K1, DEFAULT_B);
        let mut ranked: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] > 0.0).collect();
        ranked.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        let picked: Vec<ScoredValue> = if ranked.is_empty() {
            column
                .values
                .first()
                .map(|v| ScoredValue {
                    value: v.text.clone(),
                    score: 0.0,
                })
                .into_iter()
                .collect()
        } else {
            ranked
                .into_iter()
                .take(k)
                .map(|i| ScoredValue {
                    value: column.values[i].text.clone(),
                    score: scores[i],
                })
                .collect()
        };
        out.columns.insert(column.column.clone(), picked);
    }
    out
}
